//! Task-level NMSE, latency measurement, and a persistence baseline.
//!
//! Per-sample NMSE values are averaged in dB. Perfect reconstructions are
//! reported at the [`NMSE_FLOOR_DB`] sentinel instead of `-inf`.

use crate::csi_data::CsiTensor;
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::{assemble_prediction, Batch, ModelState};
use crate::tokenize_mask::{make_mask, MaskSet, MaskSpec, TokenGrid};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Value reported when the error energy is zero.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Time,
    Frequency,
}

/// A prediction task: the first `boundary` RBs along the task axis are
/// known, the rest are predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub boundary: usize,
}

impl TaskSpec {
    pub fn time(boundary: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Time,
            boundary,
        }
    }

    pub fn frequency(boundary: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Frequency,
            boundary,
        }
    }

    /// Half-horizon tasks for tensors of `dims`: `X_T = T/2`, `X_F = K/2`.
    pub fn halves(dims: (usize, usize, usize)) -> [TaskSpec; 2] {
        [TaskSpec::time(dims.0 / 2), TaskSpec::frequency(dims.1 / 2)]
    }

    pub fn name(&self) -> String {
        match self.kind {
            TaskKind::Time => format!("time@{}", self.boundary),
            TaskKind::Frequency => format!("frequency@{}", self.boundary),
        }
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        let len = match self.kind {
            TaskKind::Time => dims.0,
            TaskKind::Frequency => dims.1,
        };
        if self.boundary == 0 || self.boundary >= len {
            return Err(Error::Config(format!(
                "{} boundary must lie in (0, {len})",
                self.name()
            )));
        }
        Ok(())
    }

    /// The mask request shared by evaluation and training-time task masks.
    pub fn mask_spec(&self) -> MaskSpec {
        match self.kind {
            TaskKind::Time => MaskSpec::Time {
                boundary: self.boundary,
            },
            TaskKind::Frequency => MaskSpec::Frequency {
                boundary: self.boundary,
            },
        }
    }

    pub fn mask(&self, grid: &TokenGrid) -> Result<MaskSet> {
        make_mask(self.mask_spec(), grid, 0)
    }
}

fn ratio_db(err: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::DegenerateInput("reference tensor has zero energy".into()));
    }
    if err == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (err / reference).log10()).max(NMSE_FLOOR_DB))
}

fn check_dims(h_hat: &CsiTensor, h: &CsiTensor) -> Result<()> {
    if h_hat.dims() != h.dims() {
        return Err(Error::Contract(format!(
            "prediction dims {:?} differ from reference {:?}",
            h_hat.dims(),
            h.dims()
        )));
    }
    Ok(())
}

/// `10 lg(||H_hat - H||_F^2 / ||H||_F^2)` over the full tensor.
pub fn nmse_db(h_hat: &CsiTensor, h: &CsiTensor) -> Result<f64> {
    check_dims(h_hat, h)?;
    let err: f64 = h_hat
        .data()
        .iter()
        .zip(h.data())
        .map(|(a, b)| {
            let (dr, di) = (a.re as f64 - b.re as f64, a.im as f64 - b.im as f64);
            dr * dr + di * di
        })
        .sum();
    ratio_db(err, h.frobenius_sq())
}

/// NMSE restricted to the masked entries of `mask`.
pub fn nmse_masked_db(h_hat: &CsiTensor, h: &CsiTensor, mask: &MaskSet, grid: &TokenGrid) -> Result<f64> {
    check_dims(h_hat, h)?;
    let flags = mask.entry_flags(grid);
    let (mut err, mut reference) = (0.0, 0.0);
    for ((a, b), &f) in h_hat.data().iter().zip(h.data()).zip(&flags) {
        if f {
            let (dr, di) = (a.re as f64 - b.re as f64, a.im as f64 - b.im as f64);
            err += dr * dr + di * di;
            reference += b.norm_sqr() as f64;
        }
    }
    ratio_db(err, reference)
}

/// Anything that fills in the masked part of a task.
pub trait Predictor {
    fn predict(&self, h: &CsiTensor, task: &TaskSpec) -> Result<CsiTensor>;

    fn predict_many(&self, hs: &[&CsiTensor], task: &TaskSpec) -> Result<Vec<CsiTensor>> {
        hs.iter().map(|h| self.predict(h, task)).collect()
    }
}

const EVAL_CHUNK: usize = 64;

impl<S: Real> Predictor for ModelState<S> {
    fn predict(&self, h: &CsiTensor, task: &TaskSpec) -> Result<CsiTensor> {
        ModelState::predict(self, h, task)
    }

    fn predict_many(&self, hs: &[&CsiTensor], task: &TaskSpec) -> Result<Vec<CsiTensor>> {
        let Some(first) = hs.first() else {
            return Ok(Vec::new());
        };
        let grid = self.config.grid(first.dims())?;
        task.validate(grid.dims)?;
        let mask = task.mask(&grid)?;
        let mut out = Vec::with_capacity(hs.len());
        for chunk in hs.chunks(EVAL_CHUNK) {
            let batch = Batch::<S>::new(chunk, vec![mask.clone(); chunk.len()], &grid)?;
            let fwd = self.forward_batch(&batch)?;
            for (b, h) in chunk.iter().enumerate() {
                out.push(assemble_prediction(h, &fwd.pred, b, &mask, &grid)?);
            }
        }
        Ok(out)
    }
}

/// Repeats the last known RB slab across the predicted region.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn predict(&self, h: &CsiTensor, task: &TaskSpec) -> Result<CsiTensor> {
        persistence_baseline(h, task)
    }
}

/// Time task: every `t >= X_T` copies slab `t = X_T - 1`; frequency task
/// likewise along `k`.
pub fn persistence_baseline(h: &CsiTensor, task: &TaskSpec) -> Result<CsiTensor> {
    let (t_len, k_len, n_len) = h.dims();
    task.validate(h.dims())?;
    let x = task.boundary;
    let mut out = h.clone();
    for t in 0..t_len {
        for k in 0..k_len {
            let src = match task.kind {
                TaskKind::Time if t >= x => (x - 1, k),
                TaskKind::Frequency if k >= x => (t, x - 1),
                _ => continue,
            };
            for n in 0..n_len {
                out.set(t, k, n, h.get(src.0, src.1, n));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub kind: TaskKind,
    pub boundary: usize,
    pub samples: usize,
    /// Mean over samples of full-tensor NMSE in dB.
    pub nmse_db: f64,
    /// Mean over samples of masked-region NMSE in dB.
    pub nmse_masked_db: f64,
}

/// Mean of per-sample dB values.
pub fn mean_db(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs every task on every sample. `grid` supplies the token layout used
/// for the masked-region variant.
pub fn evaluate_tasks<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[&CsiTensor],
    tasks: &[TaskSpec],
    grid: &TokenGrid,
) -> Result<Vec<TaskResult>> {
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        task.validate(grid.dims)?;
        let mask = task.mask(grid)?;
        let preds = predictor.predict_many(samples, task)?;
        let mut full = Vec::with_capacity(samples.len());
        let mut masked = Vec::with_capacity(samples.len());
        for (h_hat, h) in preds.iter().zip(samples) {
            full.push(nmse_db(h_hat, h)?);
            masked.push(nmse_masked_db(h_hat, h, &mask, grid)?);
        }
        out.push(TaskResult {
            task: task.name(),
            kind: task.kind,
            boundary: task.boundary,
            samples: samples.len(),
            nmse_db: mean_db(&full),
            nmse_masked_db: mean_db(&masked),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub aggregation: String,
    pub param_count: Option<u64>,
    pub config_fingerprint: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub model: Vec<TaskResult>,
    pub persistence: Vec<TaskResult>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("predictor,task,kind,boundary,samples,nmse_db,nmse_masked_db\n");
        for (who, rows) in [("model", &self.model), ("persistence", &self.persistence)] {
            for r in rows.iter() {
                s.push_str(&format!(
                    "{who},{},{},{},{},{:.6},{:.6}\n",
                    r.task,
                    match r.kind {
                        TaskKind::Time => "time",
                        TaskKind::Frequency => "frequency",
                    },
                    r.boundary,
                    r.samples,
                    r.nmse_db,
                    r.nmse_masked_db
                ));
            }
        }
        s
    }
}

pub const AGGREGATION: &str = "mean of per-sample dB";

/// Evaluates a model and the persistence baseline on the same samples.
pub fn evaluate<S: Real>(
    state: &ModelState<S>,
    samples: &[&CsiTensor],
    tasks: &[TaskSpec],
) -> Result<EvalReport> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("evaluation set is empty".into()))?;
    let grid = state.config.grid(first.dims())?;
    Ok(EvalReport {
        dataset: String::new(),
        split: String::new(),
        aggregation: AGGREGATION.into(),
        param_count: Some(state.num_params()),
        config_fingerprint: None,
        checkpoint_hash: None,
        model: evaluate_tasks(state, samples, tasks, &grid)?,
        persistence: evaluate_tasks(&Persistence, samples, tasks, &grid)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(batch: usize, warmup: usize, samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Config("at least one repetition is required".into()));
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let pct = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Ok(LatencyStats {
            batch,
            repetitions: samples_ms.len(),
            warmup,
            mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            samples_ms,
        })
    }
}

/// Forward-only latency of one batch of `batch` copies of `h` under `task`.
pub fn bench<S: Real>(
    state: &ModelState<S>,
    h: &CsiTensor,
    task: &TaskSpec,
    batch: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 || batch == 0 {
        return Err(Error::Config("bench needs repetitions >= 1 and batch >= 1".into()));
    }
    let grid = state.config.grid(h.dims())?;
    let mask = task.mask(&grid)?;
    let samples = vec![h; batch];
    let b = Batch::<S>::new(&samples, vec![mask; batch], &grid)?;
    for _ in 0..warmup {
        std::hint::black_box(state.forward_batch(&b)?);
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(state.forward_batch(&b)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(batch, warmup, times)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub student: LatencyStats,
    pub teacher: Option<LatencyStats>,
    /// Student mean over teacher mean.
    pub latency_ratio: Option<f64>,
    pub student_params: u64,
    pub teacher_params: Option<u64>,
}
