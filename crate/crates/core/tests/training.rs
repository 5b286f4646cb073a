use mcakd::csi_data::{generate_dataset, ChannelGenConfig, Dataset, NormalizationMode, Split, SplitCounts};
use mcakd::distill::{DistillToggles, SelectionMode};
use mcakd::model::{checkpoint_hash, save_checkpoint, Batch, ModelConfig, ModelState, Role};
use mcakd::tokenize_mask::{make_mask, MaskSpec, PatchSpec};
use mcakd::train::{
    derive_seed, distill_student, epoch_loss, phase_of, pretrain_teacher, train_without_teacher, AlPlSchedule,
    DistillParts, FrozenTeacher, Phase, ScheduleMode, TrainConfig, STREAM_INIT,
};
use mcakd::distill::CaKsSet;

fn data(train: usize, val: usize) -> Dataset {
    let gen = ChannelGenConfig {
        t: 8,
        k: 4,
        n_v: 2,
        n_h_ant: 1,
        max_doppler: 50.0,
        seed: 11,
        ..Default::default()
    };
    generate_dataset(&gen, SplitCounts { train, val, test: 0 }, NormalizationMode::Global).unwrap()
}

fn teacher_cfg() -> ModelConfig {
    ModelConfig {
        depth_enc: 1,
        depth_dec: 1,
        heads: 2,
        dim: 16,
        mlp_ratio: 2.0,
        patch: PatchSpec::new(2, 2, 2),
        max_tokens: 64,
    }
}

fn student_cfg() -> ModelConfig {
    ModelConfig { dim: 8, ..teacher_cfg() }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 8,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn teacher(ds: &Dataset) -> FrozenTeacher {
    FrozenTeacher::new(pretrain_teacher(ds, &train_cfg(2), &teacher_cfg()).unwrap().state)
}

fn bits(s: &ModelState<f32>) -> Vec<u32> {
    s.tensors().iter().flat_map(|(_, t)| t.iter().map(|x| x.to_bits())).collect()
}

fn hash(s: &ModelState<f32>) -> String {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(s, &p, None).unwrap();
    checkpoint_hash(&p).unwrap()
}

#[test]
fn teacher_runs_only_in_distillation_epochs() {
    let ds = data(40, 8);
    let t = teacher(&ds);
    let out = distill_student(&ds, &t, &train_cfg(6), AlPlSchedule::fixed_cycle(2, 1, 6), &student_cfg(), DistillToggles::default()).unwrap();
    let phases: Vec<Phase> = out.metrics.iter().map(|m| m.phase).collect();
    use Phase::*;
    assert_eq!(phases, vec![Ps, Ps, Pd, Ps, Ps, Pd]);
    for m in &out.metrics {
        match m.phase {
            Ps => assert_eq!(m.teacher_forwards, 0),
            Pd => assert_eq!(m.teacher_forwards, m.batches),
        }
    }
    assert_eq!(out.teacher_forwards, out.pd_batches);
    assert_eq!(out.pd_batches, 2 * 5);
}

#[test]
fn all_autonomous_matches_teacher_free_run() {
    let ds = data(40, 8);
    let t = teacher(&ds);
    let cfg = train_cfg(3);
    let kd = distill_student(&ds, &t, &cfg, AlPlSchedule::never_distill(3), &student_cfg(), DistillToggles::default()).unwrap();
    let plain = train_without_teacher(&ds, &cfg, &student_cfg()).unwrap();
    assert_eq!(kd.teacher_forwards, 0);
    assert_eq!(bits(&kd.state), bits(&plain.state));
    assert_eq!(hash(&kd.state), hash(&plain.state));
}

#[test]
fn distillation_changes_the_student() {
    let ds = data(40, 8);
    let t = teacher(&ds);
    let cfg = train_cfg(2);
    let kd = distill_student(&ds, &t, &cfg, AlPlSchedule::always_distill(2), &student_cfg(), DistillToggles::default()).unwrap();
    let plain = train_without_teacher(&ds, &cfg, &student_cfg()).unwrap();
    assert_ne!(bits(&kd.state), bits(&plain.state));
    assert!(kd.metrics.iter().all(|m| m.l_mcakd > 0.0));
}

#[test]
fn teacher_is_frozen() {
    let ds = data(24, 8);
    let t = teacher(&ds);
    let before = hash(t.state());
    distill_student(&ds, &t, &train_cfg(2), AlPlSchedule::always_distill(2), &student_cfg(), DistillToggles::default()).unwrap();
    assert_eq!(hash(t.state()), before);
}

#[test]
fn zero_learning_rate_keeps_init() {
    let ds = data(24, 8);
    let cfg = TrainConfig { lr: 0.0, ..train_cfg(2) };
    let out = train_without_teacher(&ds, &cfg, &student_cfg()).unwrap();
    let init = ModelState::<f32>::init(&student_cfg(), Role::Student, derive_seed(cfg.seed, STREAM_INIT)).unwrap();
    assert_eq!(bits(&out.state), bits(&init));
}

#[test]
fn runs_are_deterministic() {
    let ds = data(24, 8);
    let t = teacher(&ds);
    let run = || distill_student(&ds, &t, &train_cfg(3), AlPlSchedule::fixed_cycle(1, 1, 3), &student_cfg(), DistillToggles::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(bits(&a.state), bits(&b.state));
    let strip = |m: &mcakd::train::EpochMetrics| mcakd::train::EpochMetrics { wall_ms: 0.0, ..m.clone() };
    assert_eq!(a.metrics.iter().map(strip).collect::<Vec<_>>(), b.metrics.iter().map(strip).collect::<Vec<_>>());
    let other = TrainConfig { seed: 6, ..train_cfg(3) };
    let c = distill_student(&ds, &t, &other, AlPlSchedule::fixed_cycle(1, 1, 3), &student_cfg(), DistillToggles::default()).unwrap();
    assert_ne!(bits(&a.state), bits(&c.state));
}

#[test]
fn pretraining_reduces_validation_loss() {
    let ds = data(128, 32);
    let out = pretrain_teacher(&ds, &TrainConfig { lr: 2e-3, ..train_cfg(12) }, &teacher_cfg()).unwrap();
    let first = out.metrics.first().unwrap().val_l_mse;
    let last = out.metrics.last().unwrap().val_l_mse;
    assert!(last < first, "{first} -> {last}");
    assert!(out.metrics.iter().all(|m| m.teacher_forwards == 0 && m.phase == Phase::Ps));
}

#[test]
fn zero_lambda_is_the_autonomous_loss() {
    let ds = data(16, 8);
    let t = teacher(&ds);
    let student = ModelState::<f32>::init(&student_cfg(), Role::Student, 3).unwrap();
    let grid = student_cfg().grid(ds.dims).unwrap();
    let samples = ds.split(Split::Train);
    let masks = (0..samples.len()).map(|i| make_mask(MaskSpec::Random { ratio: 0.5 }, &grid, i as u64).unwrap()).collect();
    let batch = Batch::<f32>::new(&samples, masks, &grid).unwrap();
    let caks = CaKsSet::<f32>::init(16, 8, None, 2, 0).unwrap();
    let parts = DistillParts { teacher: &t, caks: &caks, toggles: DistillToggles::default() };
    let cfg = TrainConfig { lambda: 0.0, ..train_cfg(1) };
    let (pd, losses) = epoch_loss(&batch, &student, Some(&parts), Phase::Pd, &cfg).unwrap();
    let (ps, _) = epoch_loss(&batch, &student, None, Phase::Ps, &cfg).unwrap();
    assert_eq!(pd, ps);
    assert!(losses.l_mcakd > 0.0);
    let cfg = TrainConfig { lambda: 0.1, ..cfg };
    let (pd, losses) = epoch_loss(&batch, &student, Some(&parts), Phase::Pd, &cfg).unwrap();
    assert_eq!(pd, ps + 0.1 * losses.l_mcakd);
}

#[test]
fn plateau_rule_on_recorded_history() {
    let s = AlPlSchedule {
        mode: ScheduleMode::PlateauTriggered { window: 2, min_delta: 0.01, pl_len: 2 },
        total_epochs: 12,
    };
    let history = [1.0, 0.5, 0.3, 0.299, 0.298, 0.297, 0.296, 0.295, 0.294, 0.293, 0.292, 0.291];
    use Phase::*;
    let got: Vec<Phase> = (0..12).map(|e| phase_of(e, &s, &history[..e])).collect();
    assert_eq!(got, vec![Ps, Ps, Ps, Ps, Ps, Pd, Pd, Ps, Ps, Ps, Pd, Pd]);
    // steady progress never triggers
    let falling: Vec<f64> = (0..12).map(|i| 1.0 - 0.05 * i as f64).collect();
    assert!((0..12).all(|e| phase_of(e, &s, &falling[..e]) == Ps));
}

#[test]
fn plateau_schedule_follows_validation_history() {
    let ds = data(24, 8);
    let t = teacher(&ds);
    let sched = AlPlSchedule {
        mode: ScheduleMode::PlateauTriggered { window: 1, min_delta: 1e3, pl_len: 1 },
        total_epochs: 6,
    };
    let out = distill_student(&ds, &t, &train_cfg(6), sched, &student_cfg(), DistillToggles::default()).unwrap();
    let history: Vec<f64> = out.metrics.iter().map(|m| m.val_l_mse).collect();
    for m in &out.metrics {
        assert_eq!(m.phase, phase_of(m.epoch, &sched, &history[..m.epoch]));
    }
    assert!(out.metrics.iter().any(|m| m.phase == Phase::Pd));
}

#[test]
fn first_dims_selection_trains() {
    let ds = data(16, 8);
    let t = teacher(&ds);
    let toggles = DistillToggles { selection: SelectionMode::FirstDims, ..DistillToggles::default() };
    let out = distill_student(&ds, &t, &train_cfg(1), AlPlSchedule::always_distill(1), &student_cfg(), toggles).unwrap();
    assert!(out.metrics[0].l_embed > 0.0);
}

#[test]
fn incompatible_teacher_is_rejected_before_training() {
    let ds = data(16, 8);
    let t = teacher(&ds);
    let wrong = ModelConfig { heads: 4, ..student_cfg() };
    let err = distill_student(&ds, &t, &train_cfg(1), AlPlSchedule::always_distill(1), &wrong, DistillToggles::default()).unwrap_err();
    assert!(matches!(err, mcakd::Error::Contract(_)));
    assert_eq!(t.forward_count(), 0);
}
