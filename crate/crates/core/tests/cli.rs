use mcakd::cli::{main_with_args, ExperimentConfig};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn mcakd(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("mcakd").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data, pretrain and distill into `out`; returns the config path.
fn pipeline(out: &Path, extra: &[&str]) -> PathBuf {
    let cfg = write_config(out, TINY);
    let data = out.join("dataset");
    assert_eq!(mcakd(&["gen-data", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(mcakd(&["pretrain", "--config", s(&cfg), "--out", s(out), "--data", s(&data)]), 0);
    let teacher = out.join("teacher.ckpt");
    let mut args = vec!["distill", "--config", s(&cfg), "--out", s(out), "--data", s(&data), "--teacher", s(&teacher)];
    args.extend_from_slice(extra);
    assert_eq!(mcakd(&args), 0);
    cfg
}

/// Manifest artifact hashes, minus metrics files (they carry wall times).
fn manifest_artifacts(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let map = v["artifacts"].as_object_mut().unwrap();
    map.retain(|k, _| !k.contains("metrics"));
    serde_json::Value::Object(map.clone())
}

#[test]
fn shipped_configs_validate() {
    for name in ["desk.toml", "paper-shape.toml", "tradeoff.toml", "tiny.toml"] {
        let cfg = ExperimentConfig::load(configs_dir().join(name)).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let desk = ExperimentConfig::load(configs_dir().join("desk.toml")).unwrap();
    assert_eq!(desk.dims(), (16, 8, 4));
    assert_eq!((desk.data.train, desk.data.val), (2048, 256));
    assert_eq!((desk.teacher.dim, desk.student.dim), (64, 32));
    assert_eq!((desk.teacher.train.epochs, desk.student.train.epochs), (30, 30));

    let paper = ExperimentConfig::load(configs_dir().join("paper-shape.toml")).unwrap();
    assert_eq!((paper.teacher.dim, paper.student.dim, paper.teacher.heads), (512, 256, 8));
    assert_eq!((paper.teacher.depth_enc, paper.teacher.depth_dec), (6, 4));

    let trade = ExperimentConfig::load(configs_dir().join("tradeoff.toml")).unwrap();
    let t = &trade.teacher;
    let shapes: Vec<(usize, usize, usize)> = ["version-1", "version-2", "version-3"]
        .iter()
        .map(|n| {
            let v = trade.with_variant(n).unwrap();
            v.validate().unwrap();
            (v.student.depth_enc, v.student.depth_dec, v.student.dim)
        })
        .collect();
    assert_eq!(
        shapes,
        vec![
            (t.depth_enc / 2, t.depth_dec / 2, t.dim / 2),
            (t.depth_enc, t.depth_dec, t.dim / 4),
            (t.depth_enc / 2, t.depth_dec / 2, t.dim / 4),
        ]
    );
    assert!(trade.with_variant("version-9").is_err());
}

#[test]
fn zero_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("train = 16", "train = 0").replace("val = 8", "val = 0").replace("test = 8", "test = 0");
    let cfg = write_config(dir.path(), &text);
    let out = Command::new(env!("CARGO_BIN_EXE_mcakd"))
        .args(["gen-data", "--config", s(&cfg), "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error category=config "));
}

#[test]
fn missing_file_and_bad_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let missing = dir.path().join("nope");
    assert_eq!(mcakd(&["pretrain", "--config", s(&cfg), "--out", s(dir.path()), "--data", s(&missing)]), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_mcakd"))
        .env("MCAKD_THREADS", "zero")
        .args(["gen-data", "--config", s(&cfg), "--out", s(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(mcakd(&["frobnicate"]), 2);
}

#[test]
fn head_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = write_config(out, TINY);
    let data = out.join("dataset");
    assert_eq!(mcakd(&["gen-data", "--config", s(&cfg), "--out", s(out)]), 0);
    assert_eq!(mcakd(&["pretrain", "--config", s(&cfg), "--out", s(out), "--data", s(&data)]), 0);
    // student heads 3 on a width-6 student: valid on its own, incompatible with the teacher
    let bad = TINY.replacen("heads = 2\ndim = 6", "heads = 3\ndim = 6", 1);
    assert_ne!(bad, TINY);
    let bad_cfg = out.join("bad.toml");
    fs::write(&bad_cfg, bad).unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_mcakd"))
        .args(["distill", "--config", s(&bad_cfg), "--out", s(&out.join("d")), "--data", s(&data)])
        .args(["--teacher", s(&out.join("teacher.ckpt"))])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(5));
    assert!(String::from_utf8(run.stderr).unwrap().starts_with("error category=contract "));
    assert!(!out.join("d").join("metrics.csv").exists());
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = pipeline(dir, &[]);
        let data = dir.join("dataset");
        let student = dir.join("student.ckpt");
        let teacher = dir.join("teacher.ckpt");
        assert_eq!(mcakd(&["eval", "--config", s(&cfg), "--out", s(dir), "--ckpt", s(&student), "--data", s(&data)]), 0);
        let caks = dir.join("caks.bin");
        let inspect = ["inspect", "--config", s(&cfg), "--out", s(dir), "--ckpt", s(&student), "--teacher", s(&teacher), "--caks", s(&caks), "--data", s(&data)];
        assert_eq!(mcakd(&inspect), 0);
        reports.push(
            ["gen-data", "pretrain", "distill", "eval", "inspect"]
                .map(|c| manifest_artifacts(&dir.join(format!("{c}.manifest.json")))),
        );
    }
    assert_eq!(reports[0], reports[1]);
    let eval = &reports[0][3];
    assert_eq!(eval["report.json"].as_str().unwrap().len(), 64);
    assert!(reports[0][2]["student.ckpt"].is_string());

    let dir = a.path();
    let fp = ExperimentConfig::from_toml(TINY).unwrap().fingerprint();
    for name in ["metrics.csv", "teacher_metrics.csv", "report.csv", "inspect_scores.csv"] {
        let text = fs::read_to_string(dir.join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_fingerprint={fp}"), "{name}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_fingerprint"], fp);
    assert_eq!(report["model"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_refuses_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = pipeline(out, &[]);
    let other = fs::read_to_string(&cfg).unwrap().replacen("dim = 6", "dim = 8", 1);
    let other_cfg = out.join("other.toml");
    fs::write(&other_cfg, other).unwrap();
    let code = mcakd(&[
        "eval", "--config", s(&other_cfg), "--out", s(&out.join("e")),
        "--ckpt", s(&out.join("student.ckpt")), "--data", s(&out.join("dataset")),
    ]);
    assert_eq!(code, 5);
}

#[test]
fn bench_writes_latency_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = pipeline(out, &[]);
    let code = mcakd(&[
        "bench", "--config", s(&cfg), "--out", s(out),
        "--ckpt", s(&out.join("student.ckpt")), "--teacher", s(&out.join("teacher.ckpt")),
    ]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert!(v["bench"]["latency_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(v["bench"]["student"]["repetitions"], 20);
}

/// Column values of a metrics CSV keyed by header name.
fn columns(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

#[test]
fn ablations_zero_exactly_their_component() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let cfg = pipeline(base, &[]);
    let data = base.join("dataset");
    let teacher = base.join("teacher.ckpt");
    let full = columns(&base.join("metrics.csv"));
    let nonzero = |rows: &[std::collections::HashMap<String, String>], col: &str| {
        rows.iter().filter(|r| r["phase"] == "P_d").all(|r| r[col].parse::<f64>().unwrap() > 0.0)
    };
    for col in ["l_attn", "l_embed", "l_hs"] {
        assert!(nonzero(&full, col));
    }
    assert!(full.iter().all(|r| r["selection"] == "ca-ks"));

    for (flag, col) in [("embed", "l_embed"), ("attn", "l_attn"), ("hs", "l_hs")] {
        let out = base.join(flag);
        let args = ["distill", "--config", s(&cfg), "--out", s(&out), "--data", s(&data), "--teacher", s(&teacher), "--ablate", flag];
        assert_eq!(mcakd(&args), 0);
        let rows = columns(&out.join("metrics.csv"));
        assert!(rows.iter().all(|r| r[col].parse::<f64>().unwrap() == 0.0), "{flag}");
        for other in ["l_attn", "l_embed", "l_hs"].into_iter().filter(|c| *c != col) {
            assert!(nonzero(&rows, other), "{flag} touched {other}");
        }
        let phases: Vec<&String> = rows.iter().map(|r| &r["phase"]).collect();
        assert_eq!(phases, full.iter().map(|r| &r["phase"]).collect::<Vec<_>>());
    }

    let out = base.join("caks");
    assert_eq!(mcakd(&["distill", "--config", s(&cfg), "--out", s(&out), "--data", s(&data), "--teacher", s(&teacher), "--ablate", "caks"]), 0);
    let rows = columns(&out.join("metrics.csv"));
    assert!(rows.iter().all(|r| r["selection"] == "first-dims"));
    for col in ["l_attn", "l_embed", "l_hs"] {
        assert!(nonzero(&rows, col));
    }
    assert!(rows.iter().zip(&full).all(|(a, b)| a["phase"] == b["phase"]));

    let out = base.join("alpl");
    assert_eq!(mcakd(&["distill", "--config", s(&cfg), "--out", s(&out), "--data", s(&data), "--teacher", s(&teacher), "--ablate", "alpl"]), 0);
    let rows = columns(&out.join("metrics.csv"));
    assert!(rows.iter().all(|r| r["phase"] == "P_d"));
    assert!(rows.iter().all(|r| r["selection"] == "ca-ks"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("distill.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["ablations"], serde_json::json!(["Alpl"]));
}
