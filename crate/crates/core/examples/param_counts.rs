//! Parameter counts of the shipped presets and the size-tradeoff versions.

use mcakd::cli::ExperimentConfig;
use mcakd::model::count_params;
use std::path::Path;

fn main() -> mcakd::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "paper-shape.toml"] {
        let cfg = ExperimentConfig::load(dir.join(name))?;
        let (t, s) = (count_params(&cfg.teacher_config()), count_params(&cfg.student_config()));
        println!("{name:18} teacher {t:>10}  student {s:>10}  ratio {:.2}", t as f64 / s as f64);
    }

    let trade = ExperimentConfig::load(dir.join("tradeoff.toml"))?;
    let teacher = count_params(&trade.teacher_config());
    println!("\ntradeoff teacher: {teacher} parameters");
    for v in &trade.variants {
        let cfg = trade.with_variant(&v.name)?;
        let n = count_params(&cfg.student_config());
        println!(
            "  {:10} depths {}/{} dim {:3}: {n:>8} ({:.1}% of teacher){}",
            v.name,
            v.depth_enc,
            v.depth_dec,
            v.dim,
            100.0 * n as f64 / teacher as f64,
            if cfg.distill.attn { "" } else { ", no attention term" }
        );
    }
    Ok(())
}
