//! Desk-scale pipeline from `configs/desk.toml`: pretrain a teacher, then
//! train two half-width students, one with MCAKD and one without, and
//! compare them on the time-domain task.
//!
//! `cargo run --release --example distill_desk -- [seed] [epochs]`

use mcakd::cli::ExperimentConfig;
use mcakd::csi_data::{generate_dataset, Split};
use mcakd::eval::{evaluate, mean_db, nmse_db, Persistence, Predictor, TaskSpec};
use mcakd::model::count_params;
use mcakd::train::{distill_student, pretrain_teacher, train_without_teacher, FrozenTeacher};
use std::path::Path;
use std::time::Instant;

fn main() -> mcakd::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"))?;
    if let Some(seed) = args.next().and_then(|a| a.parse().ok()) {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = args.next().and_then(|a| a.parse().ok()) {
        cfg.teacher.train.epochs = epochs;
        cfg.student.train.epochs = epochs;
    }
    let ds = generate_dataset(&cfg.data.channel, cfg.split_counts(), cfg.data.normalization)?;
    println!(
        "params: teacher {} student {}",
        count_params(&cfg.teacher_config()),
        count_params(&cfg.student_config())
    );

    let t0 = Instant::now();
    let teacher = pretrain_teacher(&ds, &cfg.teacher.train, &cfg.teacher_config())?;
    println!("teacher: {:.1}s", t0.elapsed().as_secs_f64());
    for m in &teacher.metrics {
        println!(
            "  epoch {:2} l_mse {:.4} val time {:.2} dB freq {:.2} dB",
            m.epoch, m.l_mse, m.val_nmse_time_db, m.val_nmse_freq_db
        );
    }
    let teacher = FrozenTeacher::new(teacher.state);

    let t1 = Instant::now();
    let kd = distill_student(
        &ds,
        &teacher,
        &cfg.student.train,
        cfg.schedule(),
        &cfg.student_config(),
        cfg.distill.toggles(),
    )?;
    println!("mcakd student: {:.1}s, {} teacher forwards", t1.elapsed().as_secs_f64(), kd.teacher_forwards);
    let t2 = Instant::now();
    let plain = train_without_teacher(&ds, &cfg.student.train, &cfg.student_config())?;
    println!("plain student: {:.1}s", t2.elapsed().as_secs_f64());

    let val = ds.split(Split::Val);
    let task = [TaskSpec::time(cfg.dims().0 / 2)];
    for (name, state) in [("teacher", teacher.state()), ("mcakd", &kd.state), ("no-kd", &plain.state)] {
        let r = evaluate(state, &val, &task)?;
        println!("{name:12} time NMSE {:.3} dB", r.model[0].nmse_db);
    }
    let base: Vec<f64> = Persistence
        .predict_many(&val, &task[0])?
        .iter()
        .zip(&val)
        .map(|(p, h)| nmse_db(p, h))
        .collect::<mcakd::Result<_>>()?;
    println!("{:12} time NMSE {:.3} dB", "persistence", mean_db(&base));
    Ok(())
}
