//! Multi-component adaptive knowledge distillation for masked-reconstruction
//! CSI prediction transformers.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`csi_data`]: synthetic spatial-temporal-frequency channels and their
//!   on-disk format
//! - [`tokenize_mask`]: patch tokens and the random/time/frequency masks
//! - [`model`]: the encoder/decoder transformer with attention and hidden-state taps
//! - [`distill`]: cosine distillation losses and CA-KS feature selection
//! - [`train`]: Adam, AL-PL phase scheduling, pretraining and distillation loops
//! - [`eval`]: NMSE, latency and a persistence baseline
//! - [`cli`]: the `mcakd` command surface and experiment configs

pub mod cli;
pub mod csi_data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod tokenize_mask;
pub mod train;

pub use error::{Error, Result};
