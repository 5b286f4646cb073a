//! Multi-component distillation losses and cross-attention knowledge
//! selection (CA-KS).
//!
//! All feature losses are cosine based: `1 - mean CosSim`. Attention maps
//! are compared per `(layer, head)` after flattening the two sequence axes;
//! embeddings and hidden states are compared row by row after CA-KS has
//! picked `D_s` of the teacher's `D_t` feature dimensions.
//!
//! The top-`D_s` selection is piecewise constant in the CA-KS projections,
//! so gradients reach the student through the cosine terms only.

use crate::csi_data::CsiTensor;
use crate::error::{Error, Result};
use crate::linalg::{dot, gemm_into, Mat, Real};
use crate::model::layers::trunc_normal;
use crate::model::{TapGrads, Taps};
use crate::tokenize_mask::{MaskSet, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Cosine similarity; errors on a zero-norm operand.
pub fn cos_sim<S: Real>(x: &[S], y: &[S]) -> Result<S> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    if !(nx > S::zero() && ny > S::zero()) {
        return Err(Error::DegenerateVector("zero-norm vector in cosine similarity".into()));
    }
    Ok(dot(x, y) / (nx * ny))
}

/// Cosine similarity and its gradient with respect to `y`, scaled by
/// `weight` and accumulated into `dy`.
fn cos_sim_acc<S: Real>(x: &[S], y: &[S], weight: S, dy: &mut [S]) -> Result<S> {
    let nx = dot(x, x).sqrt();
    let ny2 = dot(y, y);
    let ny = ny2.sqrt();
    if !(nx > S::zero() && ny > S::zero()) {
        return Err(Error::DegenerateVector("zero-norm vector in cosine similarity".into()));
    }
    let xy = dot(x, y);
    let c = xy / (nx * ny);
    let a = weight / (nx * ny);
    let b = weight * c / ny2;
    for ((d, &xv), &yv) in dy.iter_mut().zip(x).zip(y) {
        *d += a * xv - b * yv;
    }
    Ok(c)
}

/// `1 - (1/S) sum_l CosSim(target[l], student[l])` and its gradient with
/// respect to `student`.
pub fn row_cosine_loss<S: Real>(target: &Mat<S>, student: &Mat<S>) -> Result<(S, Mat<S>)> {
    if target.shape() != student.shape() {
        return Err(Error::Contract(format!(
            "row cosine between {:?} and {:?}",
            target.shape(),
            student.shape()
        )));
    }
    let rows = target.rows;
    if rows == 0 {
        return Err(Error::Contract("row cosine over zero rows".into()));
    }
    let mut grad = Mat::zeros(rows, student.cols);
    let w = -S::one() / S::lit(rows as f64);
    let mut sum = S::zero();
    for r in 0..rows {
        sum += cos_sim_acc(target.row(r), student.row(r), w, grad.row_mut(r))?;
    }
    Ok((S::one() - sum / S::lit(rows as f64), grad))
}

/// One side (encoder or decoder) of the attention loss:
/// `1 - mean_(l,i) CosSim(flat teacher[l,i], flat student[l,i])`.
/// Returns the value and one gradient vector per student map.
pub fn attention_side_loss<S: Real>(teacher: &[&[S]], student: &[&[S]]) -> Result<(S, Vec<Vec<S>>)> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Contract(format!(
            "attention stacks hold {} teacher and {} student maps",
            teacher.len(),
            student.len()
        )));
    }
    let n = S::lit(teacher.len() as f64);
    let w = -S::one() / n;
    let mut sum = S::zero();
    let mut grads = Vec::with_capacity(student.len());
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != s.len() {
            return Err(Error::Contract(format!(
                "attention maps of {} and {} entries",
                t.len(),
                s.len()
            )));
        }
        let mut g = vec![S::zero(); s.len()];
        sum += cos_sim_acc(t, s, w, &mut g)?;
        grads.push(g);
    }
    Ok((S::one() - sum / n, grads))
}

/// Which CA-KS module an instance serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaKsInstance {
    Embedding,
    Encoder,
    Decoder,
}

impl CaKsInstance {
    pub const ALL: [CaKsInstance; 3] = [CaKsInstance::Embedding, CaKsInstance::Encoder, CaKsInstance::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            CaKsInstance::Embedding => "embedding",
            CaKsInstance::Encoder => "encoder",
            CaKsInstance::Decoder => "decoder",
        }
    }
}

/// Cross-attention projections: student tokens are the query, teacher
/// tokens the key and value.
#[derive(Clone, Debug, PartialEq)]
pub struct CaKsState<S> {
    /// `[D_s, d_a]`
    pub wq: Mat<S>,
    /// `[D_t, d_a]`
    pub wk: Mat<S>,
    /// `[D_t, d_a]`
    pub wv: Mat<S>,
    pub heads: usize,
    pub instance: CaKsInstance,
}

impl<S: Real> CaKsState<S> {
    pub fn init(
        teacher_dim: usize,
        student_dim: usize,
        attn_dim: usize,
        heads: usize,
        instance: CaKsInstance,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || attn_dim == 0 || attn_dim % heads != 0 {
            return Err(Error::Config(format!(
                "CA-KS width {attn_dim} must be a positive multiple of heads {heads}"
            )));
        }
        if student_dim > teacher_dim {
            return Err(Error::Contract(format!(
                "student width {student_dim} exceeds teacher width {teacher_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| trunc_normal::<S, _>(&mut rng, 0.02));
        Ok(CaKsState {
            wq: mat(student_dim, attn_dim),
            wk: mat(teacher_dim, attn_dim),
            wv: mat(teacher_dim, attn_dim),
            heads,
            instance,
        })
    }

    pub fn teacher_dim(&self) -> usize {
        self.wk.rows
    }

    pub fn student_dim(&self) -> usize {
        self.wq.rows
    }

    pub fn tensors(&self) -> Vec<(String, &[S])> {
        let p = self.instance.name();
        vec![
            (format!("{p}.wq"), &self.wq.data[..]),
            (format!("{p}.wk"), &self.wk.data[..]),
            (format!("{p}.wv"), &self.wv.data[..]),
        ]
    }
}

/// Output of one CA-KS pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CaKsSelection<S> {
    /// Selected teacher dimensions, most important first.
    pub indices: Vec<usize>,
    /// `[S, D_s]` teacher features at `indices`.
    pub filtered: Mat<S>,
    /// `[S, S]` head-averaged cross-attention weights.
    pub attn: Mat<S>,
    /// Importance score per teacher dimension.
    pub scores: Vec<S>,
    /// `[S, d_a]` attention-weighted values.
    pub output: Mat<S>,
}

/// Descending stable order; ties keep ascending dimension index.
pub fn rank_descending<S: Real>(scores: &[S]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("ca_ks", "non-finite importance score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    Ok(order)
}

pub fn gather_columns<S: Real>(m: &Mat<S>, indices: &[usize]) -> Mat<S> {
    Mat::from_fn(m.rows, indices.len(), |r, j| m.at(r, indices[j]))
}

/// Cross-attention relevance, importance scoring, and top-`D_s` selection.
pub fn ca_ks_select<S: Real>(e_t: &Mat<S>, e_s: &Mat<S>, ck: &CaKsState<S>) -> Result<CaKsSelection<S>> {
    let (seq, d_t) = e_t.shape();
    let d_s = e_s.cols;
    if seq == 0 || e_s.rows != seq {
        return Err(Error::Contract(format!(
            "CA-KS sequences of {} teacher and {} student rows",
            seq, e_s.rows
        )));
    }
    if d_s > d_t {
        return Err(Error::Contract(format!("student width {d_s} exceeds teacher width {d_t}")));
    }
    if ck.teacher_dim() != d_t || ck.student_dim() != d_s {
        return Err(Error::Contract(format!(
            "CA-KS projections sized for ({}, {}) applied to ({d_t}, {d_s})",
            ck.teacher_dim(),
            ck.student_dim()
        )));
    }
    let d_a = ck.wq.cols;
    let heads = ck.heads;
    let dh = d_a / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let q = crate::linalg::matmul(e_s, &ck.wq);
    let k = crate::linalg::matmul(e_t, &ck.wk);
    let v = crate::linalg::matmul(e_t, &ck.wv);

    let mut attn = Mat::zeros(seq, seq);
    let mut output = Mat::zeros(seq, d_a);
    let inv_heads = S::one() / S::lit(heads as f64);
    let mut head_w = vec![S::zero(); seq];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let qi = &q.row(i)[cols.clone()];
            for (j, w) in head_w.iter_mut().enumerate() {
                *w = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            crate::linalg::softmax_in_place(&mut head_w);
            for (j, &w) in head_w.iter().enumerate() {
                *attn.at_mut(i, j) += w * inv_heads;
                let vj = &v.row(j)[cols.clone()];
                let out = &mut output.row_mut(i)[cols.clone()];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
    }

    // s(d) = sum_l sum_s' A[l, s'] E_t[s', d] = (1^T A) E_t
    let mut col_weight = Mat::zeros(1, seq);
    for i in 0..seq {
        for (c, &a) in col_weight.data.iter_mut().zip(attn.row(i)) {
            *c += a;
        }
    }
    let mut scores = Mat::zeros(1, d_t);
    gemm_into(S::one(), &col_weight, false, e_t, false, S::zero(), &mut scores);
    let scores = scores.data;

    let mut indices = rank_descending(&scores)?;
    indices.truncate(d_s);
    let filtered = gather_columns(e_t, &indices);
    Ok(CaKsSelection {
        indices,
        filtered,
        attn,
        scores,
        output,
    })
}

/// How teacher dimensions are picked for the feature losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    CaKs,
    /// The first `D_s` teacher dimensions (CA-KS ablated).
    FirstDims,
}

pub fn select_teacher<S: Real>(
    e_t: &Mat<S>,
    e_s: &Mat<S>,
    ck: &CaKsState<S>,
    mode: SelectionMode,
) -> Result<Mat<S>> {
    match mode {
        SelectionMode::CaKs => Ok(ca_ks_select(e_t, e_s, ck)?.filtered),
        SelectionMode::FirstDims => {
            if e_s.cols > e_t.cols || e_s.rows != e_t.rows {
                return Err(Error::Contract("student features do not fit the teacher's".into()));
            }
            let idx: Vec<usize> = (0..e_s.cols).collect();
            Ok(gather_columns(e_t, &idx))
        }
    }
}

/// Embedding loss `1 - (1/S) sum_l CosSim(E~_t[l], E_s[l])`, with the
/// gradient on `E_s`.
pub fn embedding_loss<S: Real>(
    e_t: &Mat<S>,
    e_s: &Mat<S>,
    ck: &CaKsState<S>,
    mode: SelectionMode,
) -> Result<(S, Mat<S>)> {
    let filtered = select_teacher(e_t, e_s, ck, mode)?;
    row_cosine_loss(&filtered, e_s)
}

/// Hidden-state loss: the embedding loss applied to the encoder and decoder
/// post-attention states with their own CA-KS instances, summed.
#[allow(clippy::too_many_arguments)]
pub fn hidden_loss<S: Real>(
    enc_t: &Mat<S>,
    enc_s: &Mat<S>,
    dec_t: &Mat<S>,
    dec_s: &Mat<S>,
    ck_enc: &CaKsState<S>,
    ck_dec: &CaKsState<S>,
    mode: SelectionMode,
) -> Result<(S, Mat<S>, Mat<S>)> {
    let (le, ge) = embedding_loss(enc_t, enc_s, ck_enc, mode)?;
    let (ld, gd) = embedding_loss(dec_t, dec_s, ck_dec, mode)?;
    Ok((le + ld, ge, gd))
}

/// Loss values of one step. `l_mcakd` is always the plain sum of the three
/// distillation components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub l_attn: f64,
    pub l_embed: f64,
    pub l_hs: f64,
    pub l_mcakd: f64,
    pub l_mse: f64,
}

impl DistillLosses {
    pub fn from_components(l_attn: f64, l_embed: f64, l_hs: f64, l_mse: f64) -> Self {
        DistillLosses {
            l_attn,
            l_embed,
            l_hs,
            l_mcakd: l_attn + l_embed + l_hs,
            l_mse,
        }
    }
}

/// The three CA-KS modules of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct CaKsSet<S> {
    pub embedding: CaKsState<S>,
    pub encoder: CaKsState<S>,
    pub decoder: CaKsState<S>,
}

impl<S: Real> CaKsSet<S> {
    /// `attn_dim = None` uses the student width; `heads` is normally the
    /// student head count.
    pub fn init(teacher_dim: usize, student_dim: usize, attn_dim: Option<usize>, heads: usize, seed: u64) -> Result<Self> {
        let d_a = attn_dim.unwrap_or(student_dim);
        let mk = |inst: CaKsInstance, i: u64| CaKsState::init(teacher_dim, student_dim, d_a, heads, inst, seed.wrapping_add(i));
        Ok(CaKsSet {
            embedding: mk(CaKsInstance::Embedding, 0)?,
            encoder: mk(CaKsInstance::Encoder, 1)?,
            decoder: mk(CaKsInstance::Decoder, 2)?,
        })
    }

    pub fn get(&self, instance: CaKsInstance) -> &CaKsState<S> {
        match instance {
            CaKsInstance::Embedding => &self.embedding,
            CaKsInstance::Encoder => &self.encoder,
            CaKsInstance::Decoder => &self.decoder,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[S])> {
        let mut t = self.embedding.tensors();
        t.extend(self.encoder.tensors());
        t.extend(self.decoder.tensors());
        t
    }
}

/// Writes the three CA-KS instances to a parameter file.
pub fn save_caks<S: Real>(set: &CaKsSet<S>, path: impl AsRef<std::path::Path>, config_fingerprint: Option<&str>) -> Result<()> {
    let e = &set.embedding;
    let header = crate::model::CheckpointHeader {
        version: crate::model::CHECKPOINT_VERSION,
        kind: "ca-ks".into(),
        dtype: String::new(),
        role: None,
        config: None,
        config_fingerprint: config_fingerprint.map(str::to_string),
        extra: serde_json::json!({
            "teacher_dim": e.teacher_dim(),
            "student_dim": e.student_dim(),
            "attn_dim": e.wq.cols,
            "heads": e.heads,
        }),
        tensors: Vec::new(),
    };
    crate::model::write_container(path.as_ref(), header, &set.tensors())
}

pub fn load_caks<S: Real>(path: impl AsRef<std::path::Path>) -> Result<CaKsSet<S>> {
    let (header, values) = crate::model::read_container::<S>(path.as_ref())?;
    if header.kind != "ca-ks" {
        return Err(Error::format(16, format!("expected a CA-KS file, found {}", header.kind)));
    }
    let field = |k: &str| {
        header.extra[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(16, format!("CA-KS header lacks {k}")))
    };
    let (d_t, d_s, d_a, heads) = (field("teacher_dim")?, field("student_dim")?, field("attn_dim")?, field("heads")?);
    let mut set = CaKsSet::<S>::init(d_t, d_s, Some(d_a), heads, 0)?;
    let names: Vec<String> = set.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() || names.iter().zip(&header.tensors).any(|(n, e)| *n != e.name) {
        return Err(Error::format(16, "CA-KS tensor layout does not match its header"));
    }
    let mut it = values.into_iter();
    for ck in [&mut set.embedding, &mut set.encoder, &mut set.decoder] {
        for m in [&mut ck.wq, &mut ck.wk, &mut ck.wv] {
            let v = it.next().expect("layout checked");
            if v.len() != m.data.len() {
                return Err(Error::format(16, "CA-KS tensor length mismatch"));
            }
            m.data = v;
        }
    }
    Ok(set)
}

/// Switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillToggles {
    pub attn: bool,
    pub embed: bool,
    pub hs: bool,
    pub selection: SelectionMode,
}

impl Default for DistillToggles {
    fn default() -> Self {
        DistillToggles {
            attn: true,
            embed: true,
            hs: true,
            selection: SelectionMode::CaKs,
        }
    }
}

/// Batched distillation loss over teacher and student taps from the same
/// masks. Values are means over the batch; the returned tap gradients are
/// those of the batch mean.
pub fn mcakd_loss<S: Real>(
    teacher: &Taps<S>,
    student: &Taps<S>,
    cks: &CaKsSet<S>,
    toggles: &DistillToggles,
) -> Result<(DistillLosses, TapGrads<S>)> {
    if teacher.batch != student.batch
        || teacher.heads != student.heads
        || teacher.tokens != student.tokens
        || teacher.visible != student.visible
        || teacher.attn_enc.len() != student.attn_enc.len()
        || teacher.attn_dec.len() != student.attn_dec.len()
    {
        return Err(Error::Contract(
            "teacher and student attention shapes differ".into(),
        ));
    }
    let nb = student.batch;
    let inv_b = S::one() / S::lit(nb as f64);
    let mut grads = TapGrads {
        embed: None,
        attn_enc: vec![None; student.attn_enc.len()],
        attn_dec: vec![None; student.attn_dec.len()],
        hidden_enc: None,
        hidden_dec: None,
    };

    let mut l_attn = 0.0;
    if toggles.attn {
        let sides: [(&Vec<Vec<S>>, &Vec<Vec<S>>, usize, &mut Vec<Option<Vec<S>>>); 2] = [
            (&teacher.attn_enc, &student.attn_enc, student.visible, &mut grads.attn_enc),
            (&teacher.attn_dec, &student.attn_dec, student.tokens, &mut grads.attn_dec),
        ];
        for (t_layers, s_layers, seq, g_layers) in sides {
            if s_layers.is_empty() {
                continue;
            }
            let map = seq * seq;
            for (l, g) in g_layers.iter_mut().enumerate() {
                *g = Some(vec![S::zero(); s_layers[l].len()]);
            }
            let mut side = S::zero();
            for b in 0..nb {
                let mut t_maps = Vec::new();
                let mut s_maps = Vec::new();
                for l in 0..s_layers.len() {
                    for h in 0..student.heads {
                        let off = (b * student.heads + h) * map;
                        t_maps.push(&t_layers[l][off..off + map]);
                        s_maps.push(&s_layers[l][off..off + map]);
                    }
                }
                let (v, gs) = attention_side_loss(&t_maps, &s_maps)?;
                side += v;
                let mut it = gs.into_iter();
                for g_layer in g_layers.iter_mut() {
                    let g_layer = g_layer.as_mut().expect("allocated");
                    for h in 0..student.heads {
                        let off = (b * student.heads + h) * map;
                        for (dst, src) in g_layer[off..off + map].iter_mut().zip(it.next().expect("one grad per map")) {
                            *dst = src * inv_b;
                        }
                    }
                }
            }
            l_attn += (side * inv_b).f64();
        }
    }

    let mut l_embed = 0.0;
    if toggles.embed {
        let (v, g) = batched_feature_loss(&teacher.embed, &student.embed, nb, student.tokens, &cks.embedding, toggles.selection)?;
        l_embed = v;
        grads.embed = Some(g);
    }

    let mut l_hs = 0.0;
    if toggles.hs {
        let pairs = [
            (&teacher.hidden_enc, &student.hidden_enc, student.visible, &cks.encoder),
            (&teacher.hidden_dec, &student.hidden_dec, student.tokens, &cks.decoder),
        ];
        let mut out = Vec::with_capacity(2);
        for (t, s, seq, ck) in pairs {
            let (t, s) = match (t, s) {
                (Some(t), Some(s)) => (t, s),
                _ => {
                    return Err(Error::Contract(
                        "hidden-state distillation needs encoder and decoder depth >= 1".into(),
                    ))
                }
            };
            let (v, g) = batched_feature_loss(t, s, nb, seq, ck, toggles.selection)?;
            l_hs += v;
            out.push(g);
        }
        grads.hidden_dec = out.pop();
        grads.hidden_enc = out.pop();
    }

    Ok((DistillLosses::from_components(l_attn, l_embed, l_hs, 0.0), grads))
}

fn batched_feature_loss<S: Real>(
    teacher: &Mat<S>,
    student: &Mat<S>,
    batch: usize,
    seq: usize,
    ck: &CaKsState<S>,
    mode: SelectionMode,
) -> Result<(f64, Mat<S>)> {
    let inv_b = S::one() / S::lit(batch as f64);
    let mut grad = Mat::zeros(student.rows, student.cols);
    let mut total = S::zero();
    for b in 0..batch {
        let t = teacher.rows_slice(b * seq, seq);
        let s = student.rows_slice(b * seq, seq);
        let (v, g) = embedding_loss(&t, &s, ck, mode)?;
        total += v;
        for (dst, &src) in grad.data[b * seq * s.cols..(b + 1) * seq * s.cols].iter_mut().zip(&g.data) {
            *dst = src * inv_b;
        }
    }
    Ok(((total * inv_b).f64(), grad))
}

/// Masked reconstruction error on CSI tensors:
/// `(1/|omega|) sum_(e in omega) |H[e] - H_hat[e]|^2`.
pub fn mse_loss(h_hat: &CsiTensor, h: &CsiTensor, mask: &MaskSet, grid: &TokenGrid) -> Result<f64> {
    if h_hat.dims() != h.dims() || h.dims() != grid.dims {
        return Err(Error::Contract("mse_loss operands have different dims".into()));
    }
    let flags = mask.entry_flags(grid);
    let count = flags.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::DegenerateMask("masked region is empty".into()));
    }
    let sum: f64 = h_hat
        .data()
        .iter()
        .zip(h.data())
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|((a, b), _)| {
            let dr = a.re as f64 - b.re as f64;
            let di = a.im as f64 - b.im as f64;
            dr * dr + di * di
        })
        .sum();
    Ok(sum / count as f64)
}

/// Token-space masked MSE for a batch: mean over samples of the per-sample
/// masked MSE, plus the gradient on the predicted tokens.
pub fn masked_token_mse<S: Real>(pred: &Mat<S>, target: &Mat<S>, masks: &[MaskSet], grid: &TokenGrid) -> Result<(S, Mat<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract("prediction and target token shapes differ".into()));
    }
    let g = grid.num_tokens();
    let inv_b = S::one() / S::lit(masks.len() as f64);
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut total = S::zero();
    for (b, m) in masks.iter().enumerate() {
        let omega = m.masked_entries(grid);
        if omega == 0 {
            return Err(Error::DegenerateMask("masked region is empty".into()));
        }
        let inv = S::one() / S::lit(omega as f64);
        let two = S::lit(2.0) * inv * inv_b;
        let mut sum = S::zero();
        for &gi in &m.masked_idx {
            let r = b * g + gi;
            let (p, t) = (pred.row(r), target.row(r));
            let gr = grad.row_mut(r);
            for c in 0..p.len() {
                let diff = p[c] - t[c];
                sum += diff * diff;
                gr[c] = two * diff;
            }
        }
        total += sum * inv;
    }
    Ok((total * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_identity_and_scale() {
        let t1 = [0.2f64, 0.8, 0.5, 0.5];
        let t2 = [1.0f64, 0.0, 0.3, 0.7];
        let teacher: Vec<&[f64]> = vec![&t1, &t2];
        let (v, _) = attention_side_loss(&teacher, &teacher).unwrap();
        assert!(v.abs() < 1e-12);
        let s1: Vec<f64> = t1.iter().map(|x| x * 3.7).collect();
        let s2: Vec<f64> = t2.iter().map(|x| x * 3.7).collect();
        let (v2, _) = attention_side_loss(&teacher, &[&s1[..], &s2[..]]).unwrap();
        assert!((v2 - v).abs() < 1e-6);
    }

    #[test]
    fn swapped_rows_are_orthogonal() {
        // flattened (1,0,0,1) vs (0,1,1,0)
        let t = [1.0f64, 0.0, 0.0, 1.0];
        let s = [0.0f64, 1.0, 1.0, 0.0];
        let (v, _) = attention_side_loss(&[&t[..]], &[&s[..]]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let t = [1.0f64, 0.0];
        let s = [0.0f64, 0.0];
        assert!(matches!(
            attention_side_loss(&[&t[..]], &[&s[..]]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn exact_sum() {
        let l = DistillLosses::from_components(0.3, 0.1, 0.2, 0.0);
        assert_eq!(l.l_mcakd, 0.3 + 0.1 + 0.2);
        assert!((l.l_mcakd - 0.6).abs() <= f64::EPSILON);
        assert_eq!(DistillLosses::from_components(0.0, 0.0, 0.0, 0.0).l_mcakd, 0.0);
    }

    #[test]
    fn constant_column_wins_selection() {
        let (seq, d_t) = (5, 7);
        let e_t = Mat::<f64>::from_fn(seq, d_t, |_, c| if c == 4 { 10.0 } else { 0.0 });
        let e_s = Mat::<f64>::from_fn(seq, 3, |r, c| (r + c) as f64 * 0.1 + 0.05);
        let ck = CaKsState::init(d_t, 3, 3, 1, CaKsInstance::Embedding, 4).unwrap();
        let sel = ca_ks_select(&e_t, &e_s, &ck).unwrap();
        assert_eq!(sel.indices[0], 4);
        assert!((sel.scores[4] - 10.0 * seq as f64).abs() < 1e-9);
        // remaining all-zero columns tie and keep ascending order
        assert_eq!(&sel.indices[1..], &[0, 1]);
        for r in 0..seq {
            let s: f64 = sel.attn.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_widths_permute_all_columns() {
        let e_t = Mat::<f64>::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let e_s = Mat::<f64>::from_fn(4, 5, |r, c| ((r * 3 + c) as f64 * 0.11).cos());
        let ck = CaKsState::init(5, 5, 5, 5, CaKsInstance::Encoder, 0).unwrap();
        let sel = ca_ks_select(&e_t, &e_s, &ck).unwrap();
        let mut sorted = sel.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        for r in 0..4 {
            for (j, &d) in sel.indices.iter().enumerate() {
                assert_eq!(sel.filtered.at(r, j), e_t.at(r, d));
            }
        }
    }

    #[test]
    fn wider_student_is_a_contract_error() {
        assert!(matches!(
            CaKsState::<f64>::init(4, 8, 8, 1, CaKsInstance::Embedding, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn embedding_loss_extremes() {
        let e_t = Mat::<f64>::from_fn(3, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let ck = CaKsState::init(4, 4, 4, 1, CaKsInstance::Embedding, 0).unwrap();
        let same = e_t.clone();
        let (v, _) = embedding_loss(&e_t, &same, &ck, SelectionMode::FirstDims).unwrap();
        assert!(v.abs() < 1e-6);
        let mut neg = e_t.clone();
        neg.scale(-1.0);
        let (v, _) = embedding_loss(&e_t, &neg, &ck, SelectionMode::FirstDims).unwrap();
        assert!((v - 2.0).abs() < 1e-6);
    }

    #[test]
    fn caks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let set = CaKsSet::<f32>::init(8, 4, None, 2, 9).unwrap();
        save_caks(&set, &p, Some("fp")).unwrap();
        assert_eq!(load_caks::<f32>(&p).unwrap(), set);
    }

    #[test]
    fn hidden_loss_sums_encoder_and_decoder() {
        let enc = Mat::<f64>::from_fn(2, 2, |r, c| (r + c + 1) as f64);
        let dec_t = Mat::<f64>::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let dec_s = Mat::<f64>::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let ck = CaKsState::init(2, 2, 2, 1, CaKsInstance::Encoder, 0).unwrap();
        let (v, _, _) = hidden_loss(&enc, &enc, &dec_t, &dec_s, &ck, &ck, SelectionMode::FirstDims).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }
}
