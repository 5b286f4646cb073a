//! The `mcakd` command line: experiment configs, commands and run manifests.
//!
//! Failures print one line, `error category=<config|io|numeric|contract>
//! message="..."`, and exit with 2, 3, 4 or 5 respectively.

use crate::csi_data::{
    dataset_paths, generate_channel, generate_dataset, load_dataset, normalize, save_dataset, ChannelGenConfig, Dataset,
    NormalizationMode, Split, SplitCounts,
};
use crate::distill::{ca_ks_select, cos_sim, load_caks, save_caks, CaKsInstance, DistillToggles, SelectionMode};
use crate::error::{Error, Result};
use crate::eval::{bench, evaluate, BenchReport, TaskSpec};
use crate::model::{checkpoint_hash, count_params, load_checkpoint, save_checkpoint, Batch, ModelConfig, ModelState, Role};
use crate::tokenize_mask::PatchSpec;
use crate::train::{metrics_csv, pretrain_teacher, selection_label, train_model, AlPlSchedule, DistillPlan, EpochMetrics, FrozenTeacher, ScheduleMode, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_max_tokens() -> usize {
    4096
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub channel: ChannelGenConfig,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
    #[serde(default)]
    pub normalization: NormalizationMode,
    pub patch: PatchSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    pub dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ModelSection {
    pub fn model_config(&self, patch: PatchSpec) -> ModelConfig {
        ModelConfig {
            depth_enc: self.depth_enc,
            depth_dec: self.depth_dec,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: self.mlp_ratio,
            patch,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "yes")]
    pub attn: bool,
    #[serde(default = "yes")]
    pub embed: bool,
    #[serde(default = "yes")]
    pub hs: bool,
    #[serde(default = "yes")]
    pub caks: bool,
    #[serde(default)]
    pub caks_dim: Option<usize>,
    #[serde(default)]
    pub caks_heads: Option<usize>,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            attn: true,
            embed: true,
            hs: true,
            caks: true,
            caks_dim: None,
            caks_heads: None,
        }
    }
}

impl DistillSection {
    pub fn toggles(&self) -> DistillToggles {
        DistillToggles {
            attn: self.attn,
            embed: self.embed,
            hs: self.hs,
            selection: if self.caks {
                SelectionMode::CaKs
            } else {
                SelectionMode::FirstDims
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub time_boundary: Option<usize>,
    #[serde(default)]
    pub freq_boundary: Option<usize>,
    #[serde(default = "default_bench_batch")]
    pub bench_batch: usize,
    #[serde(default = "default_bench_reps")]
    pub bench_reps: usize,
    #[serde(default = "default_bench_warmup")]
    pub bench_warmup: usize,
}

fn default_bench_batch() -> usize {
    1
}

fn default_bench_reps() -> usize {
    20
}

fn default_bench_warmup() -> usize {
    3
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            time_boundary: None,
            freq_boundary: None,
            bench_batch: default_bench_batch(),
            bench_reps: default_bench_reps(),
            bench_warmup: default_bench_warmup(),
        }
    }
}

/// A named student size, e.g. one of the size-tradeoff versions. Variants
/// whose depths differ from the teacher cannot use the attention loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSection {
    pub name: String,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub dim: usize,
}

fn default_schedule() -> ScheduleMode {
    ScheduleMode::FixedCycle { n_s: 2, n_d: 1 }
}

/// A whole experiment. The global `seed` overrides every per-section seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleMode,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<VariantSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_toml(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.channel.seed = seed;
        self.teacher.train.seed = seed;
        self.student.train.seed = seed;
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::Embed => self.distill.embed = false,
            Ablation::Attn => self.distill.attn = false,
            Ablation::Hs => self.distill.hs = false,
            Ablation::Caks => self.distill.caks = false,
            Ablation::Alpl => self.schedule = ScheduleMode::FixedCycle { n_s: 0, n_d: 1 },
        }
    }

    /// The experiment with the student replaced by variant `name`.
    pub fn with_variant(&self, name: &str) -> Result<ExperimentConfig> {
        let v = self
            .variants
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::Config(format!("no variant named {name:?}")))?;
        let mut out = self.clone();
        out.student.depth_enc = v.depth_enc;
        out.student.depth_dec = v.depth_dec;
        out.student.dim = v.dim;
        if (v.depth_enc, v.depth_dec) != (self.teacher.depth_enc, self.teacher.depth_dec) {
            out.distill.attn = false;
        }
        out.variants.clear();
        Ok(out)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let c = &self.data.channel;
        (c.t, c.k, c.n())
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.teacher.model_config(self.data.patch)
    }

    pub fn student_config(&self) -> ModelConfig {
        self.student.model_config(self.data.patch)
    }

    pub fn schedule(&self) -> AlPlSchedule {
        AlPlSchedule {
            mode: self.schedule,
            total_epochs: self.student.train.epochs,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.data.train,
            val: self.data.val,
            test: self.data.test,
        }
    }

    pub fn tasks(&self) -> [TaskSpec; 2] {
        let (t, k, _) = self.dims();
        [
            TaskSpec::time(self.eval.time_boundary.unwrap_or(t / 2)),
            TaskSpec::frequency(self.eval.freq_boundary.unwrap_or(k / 2)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_counts().total() == 0 {
            return Err(Error::Config("data section requests 0 samples".into()));
        }
        self.data.channel.validate()?;
        for (name, m) in [("teacher", self.teacher_config()), ("student", self.student_config())] {
            m.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            m.grid(self.dims()).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.teacher.train.validate()?;
        self.student.train.validate()?;
        self.schedule().validate()?;
        for t in self.tasks() {
            t.validate(self.dims())?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
pub enum Ablation {
    Embed,
    Attn,
    Hs,
    Caks,
    Alpl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Json,
    Plots,
}

#[derive(Debug, Parser)]
#[command(name = "mcakd", version, about = "Masked-reconstruction CSI transformers with multi-component distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Artifact formats to write; defaults to csv and json.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub emit: Vec<Emit>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and save a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the teacher.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset stem written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Distill a student from a pretrained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',')]
        ablate: Vec<Ablation>,
    },
    /// NMSE report for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Forward latency of a checkpoint, optionally against a teacher.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Dump CA-KS scores and teacher/student attention similarity.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Student checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// CA-KS file written by distill.
        #[arg(long)]
        caks: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of validation samples to inspect.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Inspect { .. } => "inspect",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::Distill { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::Inspect { common, .. } => common,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "config" => 2,
        "io" => 3,
        "numeric" => 4,
        _ => 5,
    }
}

/// The single error line printed on failure.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ").replace('"', "'");
    format!("error category={} message=\"{msg}\"", e.category())
}

/// Value of `MCAKD_THREADS`, if set. Work runs on the calling thread, so
/// any valid cap is satisfied.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("MCAKD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("MCAKD_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_fingerprint: String,
    seed: u64,
    version: &'static str,
    checkpoint_version: u32,
    threads_requested: Option<usize>,
    threads_used: usize,
    ablations: Vec<Ablation>,
    wall_ms: f64,
    artifacts: BTreeMap<String, String>,
}

struct Run {
    out: PathBuf,
    fingerprint: String,
    emit: Vec<Emit>,
    artifacts: BTreeMap<String, String>,
}

impl Run {
    fn emits(&self, e: Emit) -> bool {
        if self.emit.is_empty() {
            matches!(e, Emit::Csv | Emit::Json)
        } else {
            self.emit.contains(&e)
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let name = path
            .strip_prefix(&self.out)
            .unwrap_or(path)
            .display()
            .to_string();
        self.artifacts.insert(name, checkpoint_hash(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.record(&p)?;
        Ok(p)
    }

    /// CSV with the fingerprint as a leading comment line.
    fn write_csv(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let text = format!("# config_fingerprint={}\n{body}", self.fingerprint);
        self.write(name, &text)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, &text)
    }

    fn write_metrics(&mut self, prefix: &str, rows: &[EpochMetrics], selection: &str) -> Result<()> {
        if self.emits(Emit::Csv) {
            self.write_csv(&format!("{prefix}metrics.csv"), &metrics_csv(rows, selection))?;
        }
        if self.emits(Emit::Json) {
            let v = serde_json::json!({
                "config_fingerprint": self.fingerprint,
                "selection": selection,
                "epochs": rows,
            });
            self.write_json(&format!("{prefix}metrics.json"), &v)?;
        }
        if self.emits(Emit::Plots) {
            let mut s = String::from("epoch,phase,loss,l_mse,l_mcakd,val_nmse_time_db,val_nmse_freq_db\n");
            for r in rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.epoch,
                    r.phase.name(),
                    r.loss,
                    r.l_mse,
                    r.l_mcakd,
                    r.val_nmse_time_db,
                    r.val_nmse_freq_db
                ));
            }
            self.write_csv(&format!("{prefix}plot_series.csv"), &s)?;
        }
        Ok(())
    }
}

fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.dims != cfg.dims() {
        return Err(Error::Contract(format!(
            "dataset dims {:?} differ from config dims {:?}",
            ds.dims,
            cfg.dims()
        )));
    }
    Ok(ds)
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<(ModelState<f32>, String)> {
    let (state, header) = load_checkpoint::<f32>(path)?;
    let expected = match state.role {
        Role::Teacher => cfg.teacher_config(),
        Role::Student => cfg.student_config(),
    };
    if header.config.as_ref() != Some(&expected) {
        return Err(Error::Contract(format!(
            "{} architecture in {} does not match the config",
            match state.role {
                Role::Teacher => "teacher",
                Role::Student => "student",
            },
            path.display()
        )));
    }
    Ok((state, checkpoint_hash(path)?))
}

/// Runs one command. Artifacts go to `--out`, which is created if needed.
pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let threads = thread_cap()?;
    let common = cli.command.common().clone();
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let mut ablations = Vec::new();
    if let Command::Distill { ablate, .. } = &cli.command {
        ablations = ablate.clone();
        ablations.sort();
        ablations.dedup();
        for &a in &ablations {
            cfg.apply_ablation(a);
        }
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut run = Run {
        out: common.out.clone(),
        fingerprint: cfg.fingerprint(),
        emit: common.emit.clone(),
        artifacts: BTreeMap::new(),
    };

    match &cli.command {
        Command::GenData { .. } => {
            let mut ds = generate_dataset(&cfg.data.channel, cfg.split_counts(), cfg.data.normalization)?;
            ds.config_fingerprint = Some(run.fingerprint.clone());
            let stem = run.path("dataset");
            save_dataset(&ds, &stem)?;
            let (csi, json) = dataset_paths(&stem);
            run.record(&csi)?;
            run.record(&json)?;
        }
        Command::Pretrain { data, .. } => {
            let ds = load_data(data, &cfg)?;
            let out = pretrain_teacher(&ds, &cfg.teacher.train, &cfg.teacher_config())?;
            let p = run.path("teacher.ckpt");
            save_checkpoint(&out.state, &p, Some(&run.fingerprint))?;
            run.record(&p)?;
            run.write_metrics("teacher_", &out.metrics, "none")?;
        }
        Command::Distill { teacher, data, .. } => {
            let ds = load_data(data, &cfg)?;
            let (teacher_state, hash_before) = load_model(teacher, &cfg)?;
            if teacher_state.role != Role::Teacher {
                return Err(Error::Contract(format!("{} is not a teacher checkpoint", teacher.display())));
            }
            let frozen = FrozenTeacher::new(teacher_state);
            let toggles = cfg.distill.toggles();
            let out = train_model(
                &ds,
                &cfg.student_config(),
                Role::Student,
                &cfg.student.train,
                Some(DistillPlan {
                    teacher: &frozen,
                    schedule: cfg.schedule(),
                    toggles,
                    caks_dim: cfg.distill.caks_dim,
                    caks_heads: cfg.distill.caks_heads,
                }),
            )?;
            if checkpoint_hash(teacher)? != hash_before {
                return Err(Error::Contract("teacher checkpoint changed during distillation".into()));
            }
            let p = run.path("student.ckpt");
            save_checkpoint(&out.state, &p, Some(&run.fingerprint))?;
            run.record(&p)?;
            if let Some(c) = &out.caks {
                let p = run.path("caks.bin");
                save_caks(c, &p, Some(&run.fingerprint))?;
                run.record(&p)?;
            }
            run.write_metrics("", &out.metrics, selection_label(Some(&toggles)))?;
            run.artifacts.insert("teacher_hash".into(), hash_before);
        }
        Command::Eval { ckpt, data, split, .. } => {
            let split_tag = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let ds = load_data(data, &cfg)?;
            let (state, hash) = load_model(ckpt, &cfg)?;
            let samples = ds.split(split_tag);
            if samples.is_empty() {
                return Err(Error::Config(format!("dataset has no {split} samples")));
            }
            let mut report = evaluate(&state, &samples, &cfg.tasks())?;
            report.dataset = data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            report.split = split.clone();
            report.config_fingerprint = Some(run.fingerprint.clone());
            report.checkpoint_hash = Some(hash);
            if run.emits(Emit::Json) {
                run.write_json("report.json", &report)?;
            }
            if run.emits(Emit::Csv) {
                run.write_csv("report.csv", &report.to_csv())?;
            }
        }
        Command::Bench { ckpt, teacher, .. } => {
            let (state, _) = load_model(ckpt, &cfg)?;
            let h = normalize(&generate_channel(&cfg.data.channel, cfg.seed)?)?.0;
            let task = cfg.tasks()[0];
            let e = &cfg.eval;
            let student = bench(&state, &h, &task, e.bench_batch, e.bench_reps, e.bench_warmup)?;
            let (teacher_stats, teacher_params) = match teacher {
                Some(t) => {
                    let (ts, _) = load_model(t, &cfg)?;
                    (
                        Some(bench(&ts, &h, &task, e.bench_batch, e.bench_reps, e.bench_warmup)?),
                        Some(count_params(&ts.config)),
                    )
                }
                None => (None, None),
            };
            let report = BenchReport {
                latency_ratio: teacher_stats.as_ref().map(|t| student.mean_ms / t.mean_ms),
                student,
                teacher: teacher_stats,
                student_params: count_params(&state.config),
                teacher_params,
            };
            let v = serde_json::json!({ "config_fingerprint": run.fingerprint, "bench": report });
            run.write_json("bench.json", &v)?;
        }
        Command::Inspect { ckpt, teacher, caks, data, batch, .. } => {
            inspect(&mut run, &cfg, ckpt, teacher, caks, data, *batch)?;
        }
    }

    let manifest = Manifest {
        command: cli.command.name(),
        config_fingerprint: run.fingerprint.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: crate::model::CHECKPOINT_VERSION,
        threads_requested: threads,
        threads_used: 1,
        ablations,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        artifacts: run.artifacts.clone(),
    };
    let p = run.path(&format!("{}.manifest.json", cli.command.name()));
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn inspect(
    run: &mut Run,
    cfg: &ExperimentConfig,
    ckpt: &Path,
    teacher: &Path,
    caks: &Path,
    data: &Path,
    count: usize,
) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let (student, _) = load_model(ckpt, cfg)?;
    let (teacher, _) = load_model(teacher, cfg)?;
    let set = load_caks::<f32>(caks)?;
    let mut samples = ds.split(Split::Val);
    if samples.is_empty() {
        samples = ds.split(Split::Train);
    }
    samples.truncate(count.max(1));
    let grid = student.config.grid(ds.dims)?;
    let mask = cfg.tasks()[0].mask(&grid)?;
    let batch = Batch::<f32>::new(&samples, vec![mask; samples.len()], &grid)?;
    let ts = teacher.forward_batch(&batch)?.taps;
    let ss = student.forward_batch(&batch)?.taps;

    let mut scores = String::from("instance,sample,dim,score,rank\n");
    for inst in CaKsInstance::ALL {
        for b in 0..samples.len() {
            let (t, s) = match inst {
                CaKsInstance::Embedding => (Some(ts.embed_of(b)), Some(ss.embed_of(b))),
                CaKsInstance::Encoder => (ts.hidden_enc_of(b), ss.hidden_enc_of(b)),
                CaKsInstance::Decoder => (ts.hidden_dec_of(b), ss.hidden_dec_of(b)),
            };
            let (Some(t), Some(s)) = (t, s) else { continue };
            let sel = ca_ks_select(&t, &s, set.get(inst))?;
            let mut rank = vec![-1i64; sel.scores.len()];
            for (r, &d) in sel.indices.iter().enumerate() {
                rank[d] = r as i64;
            }
            for (d, sc) in sel.scores.iter().enumerate() {
                scores.push_str(&format!("{},{b},{d},{sc},{}\n", inst.name(), rank[d]));
            }
        }
    }
    run.write_csv("inspect_scores.csv", &scores)?;

    let mut attn = String::from("side,layer,head,sample,cosine\n");
    for b in 0..samples.len() {
        for l in 0..ss.attn_enc.len() {
            for h in 0..ss.heads {
                let c = cos_sim(ts.attn_enc_map(l, b, h), ss.attn_enc_map(l, b, h))?;
                attn.push_str(&format!("encoder,{l},{h},{b},{c}\n"));
            }
        }
        for l in 0..ss.attn_dec.len() {
            for h in 0..ss.heads {
                let c = cos_sim(ts.attn_dec_map(l, b, h), ss.attn_dec_map(l, b, h))?;
                attn.push_str(&format!("decoder,{l},{h},{b},{c}\n"));
            }
        }
    }
    run.write_csv("inspect_attention.csv", &attn)?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Config(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            eprintln!("{}", error_line(&err));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
