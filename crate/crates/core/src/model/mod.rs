//! Masked-reconstruction encoder/decoder transformer.
//!
//! Teacher and student share this code and differ only in [`ModelConfig`].
//! A forward pass embeds every token, encodes the visible ones, decodes all
//! positions (masked ones start from a learned mask token) and maps the
//! decoder output back to token features. Every pass records [`Taps`]:
//! embeddings, per-layer per-head attention weights and the last layer's
//! post-attention residual stream for encoder and decoder.
//!
//! Parameter count (`F` token width, `D` model width, `M` MLP width):
//!
//! ```text
//! embed       F*D + D
//! mask token  D
//! head        2D (final norm) + D*F + F
//! per block   4D (two norms) + 3D^2 + 3D (qkv) + D^2 + D (proj) + D*M + M + M*D + D
//! total       embed + mask + head + (L_e + L_d) * block
//! ```
//!
//! The positional encoding is fixed and contributes no parameters.

mod checkpoint;
pub mod layers;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{read_container, write_container};

use crate::csi_data::CsiTensor;
use crate::error::{Error, Result};
use crate::eval::TaskSpec;
use crate::linalg::{Mat, Real};
use crate::tokenize_mask::{make_mask, patchify_into, unpatchify, MaskSet, PatchSpec, TokenBatch, TokenGrid};
use layers::{trunc_normal, Block, BlockCache, LayerNorm, LayerNormCache, Linear, INIT_STD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub patch: PatchSpec,
    pub max_tokens: usize,
}

impl ModelConfig {
    /// Paper-scale teacher: depths 6/4, 8 heads, width 512.
    pub fn paper_teacher(patch: PatchSpec) -> Self {
        ModelConfig {
            depth_enc: 6,
            depth_dec: 4,
            heads: 8,
            dim: 512,
            mlp_ratio: 4.0,
            patch,
            max_tokens: 4096,
        }
    }

    /// Paper-scale student: the teacher at half width.
    pub fn paper_student(patch: PatchSpec) -> Self {
        ModelConfig {
            dim: 256,
            ..Self::paper_teacher(patch)
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn feature_width(&self) -> usize {
        self.patch.feature_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 {
            return Err(Error::Config("heads and dim must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim < 6 || self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "dim {} must be even and at least 6 for the 3D positional encoding",
                self.dim
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.patch.volume() == 0 {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must be at least 2".into()));
        }
        Ok(())
    }

    /// Token grid for tensors of `dims`, checked against this config.
    pub fn grid(&self, dims: (usize, usize, usize)) -> Result<TokenGrid> {
        let grid = TokenGrid::new(self.patch, dims)?;
        let g = grid.num_tokens();
        if g < 2 {
            return Err(Error::Config(format!("patch yields {g} token(s); need at least 2")));
        }
        if g > self.max_tokens {
            return Err(Error::Config(format!(
                "patch yields {g} tokens, above max_tokens {}",
                self.max_tokens
            )));
        }
        Ok(grid)
    }

    /// Whether attention maps of two configs have identical shapes for the
    /// same mask.
    pub fn attention_compatible(&self, other: &ModelConfig) -> bool {
        self.depth_enc == other.depth_enc
            && self.depth_dec == other.depth_dec
            && self.heads == other.heads
            && self.patch == other.patch
    }
}

/// Exact learnable-scalar count; see the module docs for the closed form.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let f = cfg.feature_width() as u64;
    let d = cfg.dim as u64;
    let m = cfg.mlp_hidden() as u64;
    let embed = f * d + d;
    let mask = d;
    let head = 2 * d + d * f + f;
    let block = 4 * d + 3 * d * d + 3 * d + d * d + d + d * m + m + m * d + d;
    embed + mask + head + (cfg.depth_enc + cfg.depth_dec) as u64 * block
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: ModelConfig,
    pub role: Role,
    pub embed: Linear<S>,
    pub mask_token: Vec<S>,
    pub encoder: Vec<Block<S>>,
    pub decoder: Vec<Block<S>>,
    pub head_norm: LayerNorm<S>,
    pub head: Linear<S>,
}

impl<S: Real> ModelState<S> {
    /// Truncated-normal (sigma 0.02) weights, zero biases, unit norms.
    pub fn init(config: &ModelConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, d, m) = (config.feature_width(), config.dim, config.mlp_hidden());
        let embed = Linear::init(f, d, &mut rng);
        let mask_token = (0..d).map(|_| trunc_normal(&mut rng, INIT_STD)).collect();
        let encoder = (0..config.depth_enc).map(|_| Block::init(d, m, &mut rng)).collect();
        let decoder = (0..config.depth_dec).map(|_| Block::init(d, m, &mut rng)).collect();
        let head = Linear::init(d, f, &mut rng);
        Ok(ModelState {
            config: config.clone(),
            role,
            embed,
            mask_token,
            encoder,
            decoder,
            head_norm: LayerNorm::new(d),
            head,
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let (f, d, m) = (self.config.feature_width(), self.config.dim, self.config.mlp_hidden());
        ModelState {
            config: self.config.clone(),
            role: self.role,
            embed: Linear::zeros(f, d),
            mask_token: vec![S::zero(); d],
            encoder: (0..self.encoder.len()).map(|_| Block::zeros(d, m)).collect(),
            decoder: (0..self.decoder.len()).map(|_| Block::zeros(d, m)).collect(),
            head_norm: LayerNorm::zeros(d),
            head: Linear::zeros(d, f),
        }
    }

    /// Named parameter tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &[S])> {
        let mut out: Vec<(String, &[S])> = vec![
            ("embed.w".into(), &self.embed.w.data),
            ("embed.b".into(), &self.embed.b),
            ("mask_token".into(), &self.mask_token),
        ];
        for (prefix, blocks) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, b) in blocks.iter().enumerate() {
                let p = format!("{prefix}.{i}");
                out.push((format!("{p}.ln1.gamma"), &b.ln1.gamma));
                out.push((format!("{p}.ln1.beta"), &b.ln1.beta));
                out.push((format!("{p}.attn.qkv.w"), &b.attn.qkv.w.data));
                out.push((format!("{p}.attn.qkv.b"), &b.attn.qkv.b));
                out.push((format!("{p}.attn.proj.w"), &b.attn.proj.w.data));
                out.push((format!("{p}.attn.proj.b"), &b.attn.proj.b));
                out.push((format!("{p}.ln2.gamma"), &b.ln2.gamma));
                out.push((format!("{p}.ln2.beta"), &b.ln2.beta));
                out.push((format!("{p}.fc1.w"), &b.fc1.w.data));
                out.push((format!("{p}.fc1.b"), &b.fc1.b));
                out.push((format!("{p}.fc2.w"), &b.fc2.w.data));
                out.push((format!("{p}.fc2.b"), &b.fc2.b));
            }
        }
        out.push(("head_norm.gamma".into(), &self.head_norm.gamma));
        out.push(("head_norm.beta".into(), &self.head_norm.beta));
        out.push(("head.w".into(), &self.head.w.data));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable view of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![&mut self.embed.w.data, &mut self.embed.b, &mut self.mask_token];
        for blocks in [&mut self.encoder, &mut self.decoder] {
            for b in blocks.iter_mut() {
                out.push(&mut b.ln1.gamma);
                out.push(&mut b.ln1.beta);
                out.push(&mut b.attn.qkv.w.data);
                out.push(&mut b.attn.qkv.b);
                out.push(&mut b.attn.proj.w.data);
                out.push(&mut b.attn.proj.b);
                out.push(&mut b.ln2.gamma);
                out.push(&mut b.ln2.beta);
                out.push(&mut b.fc1.w.data);
                out.push(&mut b.fc1.b);
                out.push(&mut b.fc2.w.data);
                out.push(&mut b.fc2.b);
            }
        }
        out.push(&mut self.head_norm.gamma);
        out.push(&mut self.head_norm.beta);
        out.push(&mut self.head.w.data);
        out.push(&mut self.head.b);
        out
    }

    pub fn num_params(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<T: Real>(&self) -> ModelState<T> {
        let mut out = ModelState::<T>::init(&self.config, self.role, 0).expect("validated config");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::lit(s.f64());
            }
        }
        out
    }

    /// Token embedding plus the fixed positional encoding.
    pub fn embed(&self, tb: &TokenBatch<S>) -> Result<Mat<S>> {
        if tb.tokens.cols != self.config.feature_width() {
            return Err(Error::Contract(format!(
                "token width {} does not match model width {}",
                tb.tokens.cols,
                self.config.feature_width()
            )));
        }
        let mut e = self.embed.forward(&tb.tokens);
        for (r, &coord) in tb.coords.iter().enumerate() {
            let pe = positional_encoding::<S>(coord, self.config.dim);
            for (x, p) in e.row_mut(r).iter_mut().zip(pe) {
                *x += p;
            }
        }
        Ok(e)
    }
}

/// Fixed 3D sinusoidal encoding. The width is split into three even
/// segments for the t, k and n grid coordinates; t takes any remainder.
pub fn positional_encoding<S: Real>(coord: (usize, usize, usize), dim: usize) -> Vec<S> {
    let base = 2 * (dim / 6);
    let segments = [(coord.0, dim - 2 * base), (coord.1, base), (coord.2, base)];
    let mut out = Vec::with_capacity(dim);
    for (pos, width) in segments {
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = pos as f64 * freq;
            out.push(S::lit(angle.sin()));
            out.push(S::lit(angle.cos()));
        }
    }
    debug_assert_eq!(out.len(), dim);
    out
}

/// A batch of samples sharing one token grid and one visible count.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub grid: TokenGrid,
    /// `[batch * G, F]`.
    pub tokens: Mat<S>,
    pub masks: Vec<MaskSet>,
}

impl<S: Real> Batch<S> {
    pub fn new(samples: &[&CsiTensor], masks: Vec<MaskSet>, grid: &TokenGrid) -> Result<Self> {
        if samples.len() != masks.len() || samples.is_empty() {
            return Err(Error::Contract(format!(
                "{} samples paired with {} masks",
                samples.len(),
                masks.len()
            )));
        }
        let g = grid.num_tokens();
        let f = grid.feature_width();
        let visible = masks[0].visible_idx.len();
        for (s, m) in samples.iter().zip(&masks) {
            if s.dims() != grid.dims {
                return Err(Error::Contract(format!(
                    "sample dims {:?} differ from grid dims {:?}",
                    s.dims(),
                    grid.dims
                )));
            }
            if m.num_tokens() != g || m.visible_idx.len() != visible {
                return Err(Error::Contract(
                    "masks in a batch must cover the grid with equal visible counts".into(),
                ));
            }
            if m.visible_idx.is_empty() || m.masked_idx.is_empty() {
                return Err(Error::DegenerateMask("mask has no visible or no masked tokens".into()));
            }
        }
        let mut tokens = Mat::zeros(samples.len() * g, f);
        for (b, s) in samples.iter().enumerate() {
            patchify_into(s, grid, &mut tokens.data[b * g * f..(b + 1) * g * f]);
        }
        Ok(Batch {
            grid: grid.clone(),
            tokens,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens()
    }

    pub fn num_visible(&self) -> usize {
        self.masks[0].visible_idx.len()
    }
}

/// Intermediate artifacts of one forward pass over a batch.
///
/// Attention maps are stored per layer as `[batch][head][seq][seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps<S> {
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub visible: usize,
    /// `[batch * G, D]`, post-embedding and pre-encoder.
    pub embed: Mat<S>,
    pub attn_enc: Vec<Vec<S>>,
    pub attn_dec: Vec<Vec<S>>,
    /// `[batch * V, D]` from the last encoder layer, `None` at depth 0.
    pub hidden_enc: Option<Mat<S>>,
    /// `[batch * G, D]` from the last decoder layer, `None` at depth 0.
    pub hidden_dec: Option<Mat<S>>,
}

impl<S: Real> Taps<S> {
    /// One `seq x seq` attention matrix (row-major).
    pub fn attn_enc_map(&self, layer: usize, sample: usize, head: usize) -> &[S] {
        let s = self.visible * self.visible;
        let off = (sample * self.heads + head) * s;
        &self.attn_enc[layer][off..off + s]
    }

    pub fn attn_dec_map(&self, layer: usize, sample: usize, head: usize) -> &[S] {
        let s = self.tokens * self.tokens;
        let off = (sample * self.heads + head) * s;
        &self.attn_dec[layer][off..off + s]
    }

    /// `[L_e, H, V, V]` for one sample.
    pub fn attn_enc_shape(&self) -> [usize; 4] {
        [self.attn_enc.len(), self.heads, self.visible, self.visible]
    }

    pub fn attn_dec_shape(&self) -> [usize; 4] {
        [self.attn_dec.len(), self.heads, self.tokens, self.tokens]
    }

    pub fn embed_of(&self, sample: usize) -> Mat<S> {
        self.embed.rows_slice(sample * self.tokens, self.tokens)
    }

    pub fn hidden_enc_of(&self, sample: usize) -> Option<Mat<S>> {
        self.hidden_enc
            .as_ref()
            .map(|m| m.rows_slice(sample * self.visible, self.visible))
    }

    pub fn hidden_dec_of(&self, sample: usize) -> Option<Mat<S>> {
        self.hidden_dec
            .as_ref()
            .map(|m| m.rows_slice(sample * self.tokens, self.tokens))
    }
}

/// External gradients injected at tap points during backward.
#[derive(Clone, Debug, Default)]
pub struct TapGrads<S> {
    pub embed: Option<Mat<S>>,
    pub attn_enc: Vec<Option<Vec<S>>>,
    pub attn_dec: Vec<Option<Vec<S>>>,
    pub hidden_enc: Option<Mat<S>>,
    pub hidden_dec: Option<Mat<S>>,
}

impl<S: Real> TapGrads<S> {
    pub fn none(cfg: &ModelConfig) -> Self {
        TapGrads {
            embed: None,
            attn_enc: vec![None; cfg.depth_enc],
            attn_dec: vec![None; cfg.depth_dec],
            hidden_enc: None,
            hidden_dec: None,
        }
    }
}

pub struct ForwardCache<S> {
    enc_caches: Vec<BlockCache<S>>,
    dec_caches: Vec<BlockCache<S>>,
    head_norm: LayerNormCache<S>,
    head_in: Mat<S>,
}

pub struct ForwardOut<S> {
    /// Predicted token features `[batch * G, F]`.
    pub pred: Mat<S>,
    pub taps: Taps<S>,
    pub cache: ForwardCache<S>,
}

fn check_finite<S: Real>(m: &Mat<S>, location: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location, "non-finite activation"))
    }
}

impl<S: Real> ModelState<S> {
    pub fn forward_batch(&self, batch: &Batch<S>) -> Result<ForwardOut<S>> {
        let cfg = &self.config;
        let (nb, g, v, d, heads) = (batch.len(), batch.num_tokens(), batch.num_visible(), cfg.dim, cfg.heads);
        if batch.tokens.cols != cfg.feature_width() {
            return Err(Error::Contract(format!(
                "token width {} does not match model width {}",
                batch.tokens.cols,
                cfg.feature_width()
            )));
        }
        if g > cfg.max_tokens {
            return Err(Error::Contract(format!("{g} tokens exceed max_tokens {}", cfg.max_tokens)));
        }
        let pe: Vec<Vec<S>> = batch
            .grid
            .coords()
            .into_iter()
            .map(|c| positional_encoding(c, d))
            .collect();

        let mut embed = self.embed.forward(&batch.tokens);
        for b in 0..nb {
            for (gi, p) in pe.iter().enumerate() {
                for (x, &pv) in embed.row_mut(b * g + gi).iter_mut().zip(p) {
                    *x += pv;
                }
            }
        }
        check_finite(&embed, "embed")?;

        let mut x = Mat::zeros(nb * v, d);
        for (b, m) in batch.masks.iter().enumerate() {
            for (i, &gi) in m.visible_idx.iter().enumerate() {
                x.row_mut(b * v + i).copy_from_slice(embed.row(b * g + gi));
            }
        }

        let mut attn_enc = Vec::with_capacity(self.encoder.len());
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut hidden_enc = None;
        for (l, block) in self.encoder.iter().enumerate() {
            let o = block.forward(&x, nb, v, heads);
            check_finite(&o.out, &format!("encoder.layer{l}"))?;
            attn_enc.push(o.probs);
            enc_caches.push(o.cache);
            if l + 1 == self.encoder.len() {
                hidden_enc = Some(o.hidden);
            }
            x = o.out;
        }

        let mut z = Mat::zeros(nb * g, d);
        for (b, m) in batch.masks.iter().enumerate() {
            for &gi in &m.masked_idx {
                z.row_mut(b * g + gi).copy_from_slice(&self.mask_token);
            }
            for (i, &gi) in m.visible_idx.iter().enumerate() {
                z.row_mut(b * g + gi).copy_from_slice(x.row(b * v + i));
            }
            for (gi, p) in pe.iter().enumerate() {
                for (zv, &pv) in z.row_mut(b * g + gi).iter_mut().zip(p) {
                    *zv += pv;
                }
            }
        }

        let mut attn_dec = Vec::with_capacity(self.decoder.len());
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let mut hidden_dec = None;
        for (l, block) in self.decoder.iter().enumerate() {
            let o = block.forward(&z, nb, g, heads);
            check_finite(&o.out, &format!("decoder.layer{l}"))?;
            attn_dec.push(o.probs);
            dec_caches.push(o.cache);
            if l + 1 == self.decoder.len() {
                hidden_dec = Some(o.hidden);
            }
            z = o.out;
        }

        let (head_in, head_norm) = self.head_norm.forward(&z);
        let pred = self.head.forward(&head_in);
        check_finite(&pred, "head")?;

        Ok(ForwardOut {
            pred,
            taps: Taps {
                batch: nb,
                heads,
                tokens: g,
                visible: v,
                embed,
                attn_enc,
                attn_dec,
                hidden_enc,
                hidden_dec,
            },
            cache: ForwardCache {
                enc_caches,
                dec_caches,
                head_norm,
                head_in,
            },
        })
    }

    /// Accumulates parameter gradients into `grads` given `dL/dpred` and
    /// any external gradients on the taps.
    pub fn backward(
        &self,
        batch: &Batch<S>,
        out: &ForwardOut<S>,
        dpred: &Mat<S>,
        tap_grads: &TapGrads<S>,
        grads: &mut ModelState<S>,
    ) {
        let cfg = &self.config;
        let (nb, g, v, d, heads) = (batch.len(), batch.num_tokens(), batch.num_visible(), cfg.dim, cfg.heads);
        let taps = &out.taps;

        let dhead_in = self.head.backward(&out.cache.head_in, dpred, &mut grads.head);
        let mut dz = self.head_norm.backward(&out.cache.head_norm, &dhead_in, &mut grads.head_norm);

        let last_dec = self.decoder.len().saturating_sub(1);
        for l in (0..self.decoder.len()).rev() {
            let extra_h = if l == last_dec { tap_grads.hidden_dec.as_ref() } else { None };
            let extra_p = tap_grads.attn_dec.get(l).and_then(|x| x.as_deref());
            dz = self.decoder[l].backward(
                &out.cache.dec_caches[l],
                &taps.attn_dec[l],
                &dz,
                extra_h,
                extra_p,
                nb,
                g,
                heads,
                &mut grads.decoder[l],
            );
        }

        let mut dx = Mat::zeros(nb * v, d);
        for (b, m) in batch.masks.iter().enumerate() {
            for &gi in &m.masked_idx {
                for (acc, &dv) in grads.mask_token.iter_mut().zip(dz.row(b * g + gi)) {
                    *acc += dv;
                }
            }
            for (i, &gi) in m.visible_idx.iter().enumerate() {
                dx.row_mut(b * v + i).copy_from_slice(dz.row(b * g + gi));
            }
        }

        let last_enc = self.encoder.len().saturating_sub(1);
        for l in (0..self.encoder.len()).rev() {
            let extra_h = if l == last_enc { tap_grads.hidden_enc.as_ref() } else { None };
            let extra_p = tap_grads.attn_enc.get(l).and_then(|x| x.as_deref());
            dx = self.encoder[l].backward(
                &out.cache.enc_caches[l],
                &taps.attn_enc[l],
                &dx,
                extra_h,
                extra_p,
                nb,
                v,
                heads,
                &mut grads.encoder[l],
            );
        }

        let mut dembed = match &tap_grads.embed {
            Some(e) => e.clone(),
            None => Mat::zeros(nb * g, d),
        };
        for (b, m) in batch.masks.iter().enumerate() {
            for (i, &gi) in m.visible_idx.iter().enumerate() {
                for (acc, &dv) in dembed.row_mut(b * g + gi).iter_mut().zip(dx.row(b * v + i)) {
                    *acc += dv;
                }
            }
        }
        self.embed.accumulate(&batch.tokens, &dembed, &mut grads.embed);
    }

    /// Single-sample reconstruction. Visible entries of the returned tensor
    /// are copied from `h`; only the masked region comes from the model.
    pub fn forward(&self, h: &CsiTensor, mask: &MaskSet) -> Result<(CsiTensor, Taps<S>)> {
        let grid = self.config.grid(h.dims())?;
        let batch = Batch::new(&[h], vec![mask.clone()], &grid)?;
        let out = self.forward_batch(&batch)?;
        let h_hat = assemble_prediction(h, &out.pred, 0, mask, &grid)?;
        Ok((h_hat, out.taps))
    }

    pub fn predict(&self, h: &CsiTensor, task: &TaskSpec) -> Result<CsiTensor> {
        let grid = self.config.grid(h.dims())?;
        let mask = make_mask(task.mask_spec(), &grid, 0)?;
        Ok(self.forward(h, &mask)?.0)
    }
}

/// Builds `H_hat` for sample `b` of a batch prediction: masked tokens come
/// from `pred`, visible entries are copied from `h`.
pub fn assemble_prediction<S: Real>(
    h: &CsiTensor,
    pred: &Mat<S>,
    sample: usize,
    mask: &MaskSet,
    grid: &TokenGrid,
) -> Result<CsiTensor> {
    let g = grid.num_tokens();
    let tb = TokenBatch {
        tokens: pred.rows_slice(sample * g, g),
        coords: grid.coords(),
    };
    let predicted = unpatchify(&tb, grid.spec, grid.dims)?;
    let flags = mask.entry_flags(grid);
    let mut out = h.clone();
    for (i, z) in out.data_mut().iter_mut().enumerate() {
        if flags[i] {
            *z = predicted.data()[i];
        }
    }
    Ok(out)
}
