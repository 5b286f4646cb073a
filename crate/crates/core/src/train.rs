//! Teacher pretraining and AL-PL student distillation.
//!
//! Each epoch is either autonomous (`P_s`, loss `L_mse`) or passive
//! (`P_d`, loss `L_mse + lambda * L_MCAKD`). The teacher is only run during
//! `P_d` batches; [`FrozenTeacher`] counts its forward passes.
//!
//! Randomness comes from independent ChaCha streams of the run seed (student
//! init, CA-KS init, shuffling, masks, validation split), so a distillation
//! run whose schedule never enters `P_d` replays a teacher-free run exactly.

use crate::csi_data::{CsiTensor, Dataset, Split};
use crate::distill::{masked_token_mse, mcakd_loss, mse_loss, CaKsSet, DistillLosses, DistillToggles, SelectionMode};
use crate::error::{Error, Result};
use crate::eval::TaskSpec;
use crate::model::{assemble_prediction, Batch, ModelConfig, ModelState, Role, TapGrads, Taps};
use crate::tokenize_mask::{make_mask, MaskSet, MaskSpec, MaskStrategy, TokenGrid};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "P_s")]
    Ps,
    #[serde(rename = "P_d")]
    Pd,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ps => "P_s",
            Phase::Pd => "P_d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleMode {
    /// `n_s` autonomous epochs, then `n_d` distillation epochs, repeated.
    FixedCycle { n_s: usize, n_d: usize },
    /// Autonomous until the best validation `L_mse` improves by less than
    /// `min_delta` over `window` epochs, then `pl_len` distillation epochs.
    PlateauTriggered { window: usize, min_delta: f64, pl_len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlPlSchedule {
    pub mode: ScheduleMode,
    pub total_epochs: usize,
}

impl AlPlSchedule {
    pub fn fixed_cycle(n_s: usize, n_d: usize, total_epochs: usize) -> Self {
        AlPlSchedule {
            mode: ScheduleMode::FixedCycle { n_s, n_d },
            total_epochs,
        }
    }

    /// Distillation in every epoch.
    pub fn always_distill(total_epochs: usize) -> Self {
        Self::fixed_cycle(0, 1, total_epochs)
    }

    /// Never distill.
    pub fn never_distill(total_epochs: usize) -> Self {
        Self::fixed_cycle(1, 0, total_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ScheduleMode::FixedCycle { n_s, n_d } if n_s + n_d == 0 => {
                Err(Error::Config("fixed cycle needs n_s + n_d > 0".into()))
            }
            ScheduleMode::PlateauTriggered { window, min_delta, pl_len }
                if window == 0 || pl_len == 0 || !(min_delta >= 0.0) =>
            {
                Err(Error::Config(
                    "plateau schedule needs window >= 1, pl_len >= 1, min_delta >= 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Phase of epoch `e`. `history[j]` is the validation `L_mse` after epoch
/// `j`; only entries before `e` are consulted.
pub fn phase_of(e: usize, sched: &AlPlSchedule, history: &[f64]) -> Phase {
    match sched.mode {
        ScheduleMode::FixedCycle { n_s, n_d } => {
            if e % (n_s + n_d).max(1) < n_s {
                Phase::Ps
            } else {
                Phase::Pd
            }
        }
        ScheduleMode::PlateauTriggered { window, min_delta, pl_len } => {
            let mut run_start = 0;
            let mut remaining = 0;
            let mut phase = Phase::Ps;
            for j in 0..=e {
                if remaining > 0 {
                    phase = Phase::Pd;
                    remaining -= 1;
                } else if plateau(history, run_start, j, window, min_delta) {
                    phase = Phase::Pd;
                    remaining = pl_len - 1;
                } else {
                    phase = Phase::Ps;
                }
                if phase == Phase::Pd && remaining == 0 {
                    run_start = j + 1;
                }
            }
            phase
        }
    }
}

/// Whether the running best since `run_start` improved by less than
/// `min_delta` between epochs `j - 1 - window` and `j - 1`.
fn plateau(history: &[f64], run_start: usize, j: usize, window: usize, min_delta: f64) -> bool {
    if j < run_start + window + 1 || j > history.len() {
        return false;
    }
    let best = |upto: usize| history[run_start..=upto].iter().copied().fold(f64::INFINITY, f64::min);
    best(j - 1 - window) - best(j - 1) < min_delta
}

/// Relative weights of the three masking strategies in training batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskMix {
    pub random: f64,
    pub time: f64,
    pub frequency: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        MaskMix {
            random: 1.0,
            time: 1.0,
            frequency: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub seed: u64,
    pub mask_mix: MaskMix,
    pub mask_ratio: f64,
    pub cosine_decay: bool,
    /// Share of train samples held out when the dataset has no val split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 64,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.1,
            seed: 0,
            mask_mix: MaskMix::default(),
            mask_ratio: 0.5,
            cosine_decay: false,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("lr must be >= 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let w = [self.mask_mix.random, self.mask_mix.time, self.mask_mix.frequency];
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mask mix weights must be >= 0 with a positive sum".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config("mask ratio must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay && self.epochs > 0 {
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr
        }
    }
}

/// Ids of the independent random streams derived from a run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_CAKS: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_MASK: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed for one named random stream of a run.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    stream(seed, id).next_u64()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (b1, b2, eps, lr) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32, lr as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// A teacher that cannot be mutated and counts its forward passes.
#[derive(Debug)]
pub struct FrozenTeacher {
    state: ModelState<f32>,
    forwards: Cell<u64>,
}

impl FrozenTeacher {
    pub fn new(state: ModelState<f32>) -> Self {
        FrozenTeacher {
            state,
            forwards: Cell::new(0),
        }
    }

    pub fn state(&self) -> &ModelState<f32> {
        &self.state
    }

    /// Batched forward passes run so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.get()
    }

    pub fn taps(&self, batch: &Batch<f32>) -> Result<Taps<f32>> {
        self.forwards.set(self.forwards.get() + 1);
        Ok(self.state.forward_batch(batch)?.taps)
    }
}

/// What a `P_d` batch needs beyond the student.
pub struct DistillParts<'a> {
    pub teacher: &'a FrozenTeacher,
    pub caks: &'a CaKsSet<f32>,
    pub toggles: DistillToggles,
}

/// `L_mse` in `P_s`, `L_mse + lambda * L_MCAKD` in `P_d`.
pub fn combine_loss(phase: Phase, l_mse: f64, l_mcakd: f64, lambda: f64) -> f64 {
    match phase {
        Phase::Ps => l_mse,
        Phase::Pd => l_mse + lambda * l_mcakd,
    }
}

fn step(
    student: &ModelState<f32>,
    batch: &Batch<f32>,
    distill: Option<&DistillParts>,
    phase: Phase,
    lambda: f64,
    grads: Option<&mut ModelState<f32>>,
) -> Result<(f64, DistillLosses)> {
    let out = student.forward_batch(batch)?;
    let (l_mse, dpred) = masked_token_mse(&out.pred, &batch.tokens, &batch.masks, &batch.grid)?;
    let l_mse = l_mse as f64;
    let mut losses = DistillLosses::from_components(0.0, 0.0, 0.0, l_mse);
    let mut tap_grads = TapGrads::none(&student.config);
    if phase == Phase::Pd {
        let parts = distill.ok_or_else(|| Error::Contract("distillation phase without a teacher".into()))?;
        let teacher_taps = parts.teacher.taps(batch)?;
        let (d, mut g) = mcakd_loss(&teacher_taps, &out.taps, parts.caks, &parts.toggles)?;
        losses = DistillLosses::from_components(d.l_attn, d.l_embed, d.l_hs, l_mse);
        let lam = lambda as f32;
        for m in [&mut g.embed, &mut g.hidden_enc, &mut g.hidden_dec].into_iter().flatten() {
            m.scale(lam);
        }
        for v in g.attn_enc.iter_mut().chain(g.attn_dec.iter_mut()).flatten() {
            v.iter_mut().for_each(|x| *x *= lam);
        }
        tap_grads = g;
    }
    let loss = combine_loss(phase, l_mse, losses.l_mcakd, lambda);
    if !loss.is_finite() {
        return Err(Error::numeric("loss", format!("non-finite loss {loss}")));
    }
    if let Some(grads) = grads {
        student.backward(batch, &out, &dpred, &tap_grads, grads);
    }
    Ok((loss, losses))
}

/// Loss of one batch under the phase-dependent objective. No teacher pass
/// happens in `P_s`.
pub fn epoch_loss(
    batch: &Batch<f32>,
    student: &ModelState<f32>,
    distill: Option<&DistillParts>,
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<(f64, DistillLosses)> {
    step(student, batch, distill, phase, cfg.lambda, None)
}

/// Train and validation samples. Val-tagged samples are used when present;
/// otherwise `val_fraction` of the train split is held out by seed.
pub fn train_val_split<'a>(ds: &'a Dataset, cfg: &TrainConfig) -> Result<(Vec<&'a CsiTensor>, Vec<&'a CsiTensor>)> {
    let mut train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let val = ds.indices(Split::Val);
    let (train, val) = if !val.is_empty() {
        (train, val)
    } else {
        train.shuffle(&mut stream(cfg.seed, STREAM_SPLIT));
        let n_val = (train.len() as f64 * cfg.val_fraction).round() as usize;
        let mut val = train.split_off(train.len() - n_val);
        val.sort_unstable();
        train.sort_unstable();
        (train, val)
    };
    if train.is_empty() {
        return Err(Error::Config("validation hold-out leaves no training samples".into()));
    }
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| &ds.samples[i]).collect();
    Ok((pick(train), pick(val)))
}

/// Draws one strategy for the batch, then a mask per sample. All masks in a
/// batch have the same visible count.
pub fn draw_masks(rng: &mut ChaCha8Rng, cfg: &TrainConfig, grid: &TokenGrid, n: usize) -> Result<Vec<MaskSet>> {
    let mix = &cfg.mask_mix;
    let dist = WeightedIndex::new([mix.random, mix.time, mix.frequency])
        .map_err(|e| Error::Config(format!("mask mix: {e}")))?;
    let strategy = MaskStrategy::ALL[dist.sample(rng)];
    let spec = MaskSpec::from_ratio(strategy, cfg.mask_ratio, grid)?;
    match spec {
        MaskSpec::Random { .. } => (0..n).map(|_| make_mask(spec, grid, rng.next_u64())).collect(),
        _ => {
            let m = make_mask(spec, grid, 0)?;
            Ok(vec![m; n])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub l_mse: f64,
    pub l_attn: f64,
    pub l_embed: f64,
    pub l_hs: f64,
    pub l_mcakd: f64,
    pub loss: f64,
    pub val_nmse_time_db: f64,
    pub val_nmse_freq_db: f64,
    /// Mean of the per-strategy validation `L_mse` values.
    pub val_l_mse: f64,
    pub val_l_mse_random: f64,
    pub val_l_mse_time: f64,
    pub val_l_mse_freq: f64,
    pub batches: u64,
    pub teacher_forwards: u64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,l_mse,l_attn,l_embed,l_hs,l_mcakd,val_nmse_time_db,val_nmse_freq_db,wall_ms,loss,val_l_mse,val_l_mse_random,val_l_mse_time,val_l_mse_freq,batches,teacher_forwards,selection";

/// One CSV row per epoch. `selection` names the teacher-dimension picker
/// (`none` for runs without distillation).
pub fn metrics_csv(rows: &[EpochMetrics], selection: &str) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.phase.name(),
            r.l_mse,
            r.l_attn,
            r.l_embed,
            r.l_hs,
            r.l_mcakd,
            r.val_nmse_time_db,
            r.val_nmse_freq_db,
            r.wall_ms,
            r.loss,
            r.val_l_mse,
            r.val_l_mse_random,
            r.val_l_mse_time,
            r.val_l_mse_freq,
            r.batches,
            r.teacher_forwards,
            selection
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValStats {
    pub nmse_time_db: f64,
    pub nmse_freq_db: f64,
    pub l_mse_random: f64,
    pub l_mse_time: f64,
    pub l_mse_freq: f64,
}

const VAL_CHUNK: usize = 64;

fn reconstruct(state: &ModelState<f32>, samples: &[&CsiTensor], masks: &[MaskSet], grid: &TokenGrid) -> Result<Vec<CsiTensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, mchunk) in samples.chunks(VAL_CHUNK).zip(masks.chunks(VAL_CHUNK)) {
        let batch = Batch::<f32>::new(chunk, mchunk.to_vec(), grid)?;
        let fwd = state.forward_batch(&batch)?;
        for (b, h) in chunk.iter().enumerate() {
            out.push(assemble_prediction(h, &fwd.pred, b, &mchunk[b], grid)?);
        }
    }
    Ok(out)
}

/// Validation NMSE on the half-horizon tasks and `L_mse` per strategy.
/// Random masks use sample `i`'s index as seed so every epoch sees the same
/// masks.
pub fn validate(state: &ModelState<f32>, val: &[&CsiTensor], grid: &TokenGrid, cfg: &TrainConfig) -> Result<ValStats> {
    if val.is_empty() {
        return Ok(ValStats {
            nmse_time_db: f64::NAN,
            nmse_freq_db: f64::NAN,
            l_mse_random: f64::NAN,
            l_mse_time: f64::NAN,
            l_mse_freq: f64::NAN,
        });
    }
    let [time, freq] = TaskSpec::halves(grid.dims);
    let mut stats = ValStats::default();
    let random = MaskSpec::from_ratio(MaskStrategy::Random, cfg.mask_ratio, grid)?;
    let random_masks = (0..val.len())
        .map(|i| make_mask(random, grid, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let preds = reconstruct(state, val, &random_masks, grid)?;
    stats.l_mse_random = mean_mse(&preds, val, &random_masks, grid)?;
    for (task, nmse, mse) in [
        (time, &mut stats.nmse_time_db, &mut stats.l_mse_time),
        (freq, &mut stats.nmse_freq_db, &mut stats.l_mse_freq),
    ] {
        let mask = task.mask(grid)?;
        let masks = vec![mask; val.len()];
        let preds = reconstruct(state, val, &masks, grid)?;
        let db = preds
            .iter()
            .zip(val)
            .map(|(p, h)| crate::eval::nmse_db(p, h))
            .collect::<Result<Vec<_>>>()?;
        *nmse = crate::eval::mean_db(&db);
        *mse = mean_mse(&preds, val, &masks, grid)?;
    }
    Ok(stats)
}

fn mean_mse(preds: &[CsiTensor], refs: &[&CsiTensor], masks: &[MaskSet], grid: &TokenGrid) -> Result<f64> {
    let mut s = 0.0;
    for ((p, h), m) in preds.iter().zip(refs).zip(masks) {
        s += mse_loss(p, h, m, grid)?;
    }
    Ok(s / preds.len() as f64)
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutput {
    pub state: ModelState<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub caks: Option<CaKsSet<f32>>,
    pub teacher_forwards: u64,
    pub pd_batches: u64,
}

/// Distillation settings for [`train_model`].
pub struct DistillPlan<'a> {
    pub teacher: &'a FrozenTeacher,
    pub schedule: AlPlSchedule,
    pub toggles: DistillToggles,
    pub caks_dim: Option<usize>,
    pub caks_heads: Option<usize>,
}

/// Shared loop behind [`pretrain_teacher`], [`train_without_teacher`] and
/// [`distill_student`].
pub fn train_model(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    role: Role,
    cfg: &TrainConfig,
    plan: Option<DistillPlan>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let grid = model_cfg.grid(ds.dims)?;
    let (train, val) = train_val_split(ds, cfg)?;

    let caks = match &plan {
        Some(p) => {
            let t = &p.teacher.state().config;
            if !t.attention_compatible(model_cfg) {
                return Err(Error::Contract(format!(
                    "teacher (depths {}/{}, heads {}, patch {:?}) and student (depths {}/{}, heads {}, patch {:?}) attention shapes differ",
                    t.depth_enc, t.depth_dec, t.heads, t.patch,
                    model_cfg.depth_enc, model_cfg.depth_dec, model_cfg.heads, model_cfg.patch
                )));
            }
            if model_cfg.dim > t.dim {
                return Err(Error::Contract(format!(
                    "student width {} exceeds teacher width {}",
                    model_cfg.dim, t.dim
                )));
            }
            if p.toggles.hs && (model_cfg.depth_enc == 0 || model_cfg.depth_dec == 0) {
                return Err(Error::Contract("hidden-state distillation needs depth >= 1".into()));
            }
            p.schedule.validate()?;
            Some(CaKsSet::<f32>::init(
                t.dim,
                model_cfg.dim,
                p.caks_dim,
                p.caks_heads.unwrap_or(model_cfg.heads),
                derive_seed(cfg.seed, STREAM_CAKS),
            )?)
        }
        None => None,
    };

    let mut state = ModelState::<f32>::init(model_cfg, role, derive_seed(cfg.seed, STREAM_INIT))?;
    let sizes: Vec<usize> = state.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream(cfg.seed, STREAM_MASK);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut pd_batches = 0;
    let teacher_start = plan.as_ref().map_or(0, |p| p.teacher.forward_count());

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let phase = match &plan {
            Some(p) => phase_of(epoch, &p.schedule, &history),
            None => Phase::Ps,
        };
        let parts = match (&plan, &caks) {
            (Some(p), Some(c)) => Some(DistillParts {
                teacher: p.teacher,
                caks: c,
                toggles: p.toggles,
            }),
            _ => None,
        };
        let forwards_before = plan.as_ref().map_or(0, |p| p.teacher.forward_count());
        order.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at(epoch);
        let mut sums = [0.0f64; 5];
        let mut batches = 0u64;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let samples: Vec<&CsiTensor> = idx.iter().map(|&i| train[i]).collect();
            let masks = draw_masks(&mut mask_rng, cfg, &grid, samples.len())?;
            let batch = Batch::<f32>::new(&samples, masks, &grid)?;
            let mut grads = state.zeros_like();
            let (loss, l) = step(&state, &batch, parts.as_ref(), phase, cfg.lambda, Some(&mut grads))
                .map_err(|e| match e {
                    Error::Numeric { location, message } => {
                        Error::numeric(format!("epoch {epoch} batch {bi} {location}"), message)
                    }
                    other => other,
                })?;
            let grad_tensors: Vec<&[f32]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            adam.step(state.tensors_mut(), grad_tensors, lr);
            if !state.is_finite() {
                return Err(Error::numeric(format!("epoch {epoch} batch {bi}"), "parameters diverged"));
            }
            for (s, v) in sums.iter_mut().zip([loss, l.l_mse, l.l_attn, l.l_embed, l.l_hs]) {
                *s += v;
            }
            batches += 1;
            if phase == Phase::Pd {
                pd_batches += 1;
            }
        }
        let nb = batches.max(1) as f64;
        let v = validate(&state, &val, &grid, cfg)?;
        let val_l_mse = (v.l_mse_random + v.l_mse_time + v.l_mse_freq) / 3.0;
        history.push(val_l_mse);
        let avg = DistillLosses::from_components(sums[2] / nb, sums[3] / nb, sums[4] / nb, sums[1] / nb);
        metrics.push(EpochMetrics {
            epoch,
            phase,
            l_mse: avg.l_mse,
            l_attn: avg.l_attn,
            l_embed: avg.l_embed,
            l_hs: avg.l_hs,
            l_mcakd: avg.l_mcakd,
            loss: sums[0] / nb,
            val_nmse_time_db: v.nmse_time_db,
            val_nmse_freq_db: v.nmse_freq_db,
            val_l_mse,
            val_l_mse_random: v.l_mse_random,
            val_l_mse_time: v.l_mse_time,
            val_l_mse_freq: v.l_mse_freq,
            batches,
            teacher_forwards: plan.as_ref().map_or(0, |p| p.teacher.forward_count()) - forwards_before,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainOutput {
        state,
        metrics,
        caks,
        teacher_forwards: plan.as_ref().map_or(0, |p| p.teacher.forward_count()) - teacher_start,
        pd_batches,
    })
}

/// Self-supervised pretraining with the three masking strategies mixed.
pub fn pretrain_teacher(ds: &Dataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutput> {
    train_model(ds, model_cfg, Role::Teacher, cfg, None)
}

/// The no-distillation student baseline.
pub fn train_without_teacher(ds: &Dataset, cfg: &TrainConfig, student_cfg: &ModelConfig) -> Result<TrainOutput> {
    train_model(ds, student_cfg, Role::Student, cfg, None)
}

/// Trains a student under the AL-PL schedule against a frozen teacher.
pub fn distill_student(
    ds: &Dataset,
    teacher: &FrozenTeacher,
    cfg: &TrainConfig,
    schedule: AlPlSchedule,
    student_cfg: &ModelConfig,
    toggles: DistillToggles,
) -> Result<TrainOutput> {
    train_model(
        ds,
        student_cfg,
        Role::Student,
        cfg,
        Some(DistillPlan {
            teacher,
            schedule,
            toggles,
            caks_dim: None,
            caks_heads: None,
        }),
    )
}

pub fn selection_label(toggles: Option<&DistillToggles>) -> &'static str {
    match toggles.map(|t| t.selection) {
        None => "none",
        Some(SelectionMode::CaKs) => "ca-ks",
        Some(SelectionMode::FirstDims) => "first-dims",
    }
}
