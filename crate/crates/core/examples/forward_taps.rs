//! Runs one forward pass of a freshly initialized teacher and prints the
//! shapes of everything the distillation losses read.

use mcakd::csi_data::{generate_channel, normalize, ChannelGenConfig};
use mcakd::eval::TaskSpec;
use mcakd::model::{Batch, ModelConfig, ModelState, Role};
use mcakd::tokenize_mask::PatchSpec;

fn main() -> mcakd::Result<()> {
    let cfg = ModelConfig {
        depth_enc: 2,
        depth_dec: 1,
        heads: 4,
        dim: 64,
        mlp_ratio: 4.0,
        patch: PatchSpec::new(2, 4, 2),
        max_tokens: 256,
    };
    let state = ModelState::<f32>::init(&cfg, Role::Teacher, 0)?;
    let h = normalize(&generate_channel(&ChannelGenConfig::default(), 0)?)?.0;
    let grid = cfg.grid(h.dims())?;
    let mask = TaskSpec::time(h.dims().0 / 2).mask(&grid)?;
    let batch = Batch::<f32>::new(&[&h], vec![mask], &grid)?;
    let taps = state.forward_batch(&batch)?.taps;

    println!("{} parameters, {} tokens, {} visible", state.num_params(), taps.tokens, taps.visible);
    println!("embedding      {:?}", taps.embed.shape());
    println!("encoder attn   {:?}", taps.attn_enc_shape());
    println!("decoder attn   {:?}", taps.attn_dec_shape());
    println!("encoder hidden {:?}", taps.hidden_enc.as_ref().map(|m| m.shape()));
    println!("decoder hidden {:?}", taps.hidden_dec.as_ref().map(|m| m.shape()));
    let row = &taps.attn_enc_map(0, 0, 0)[..taps.visible];
    println!("first encoder attention row sums to {:.6}", row.iter().sum::<f32>());
    Ok(())
}
