//! Forward latency of a teacher and its half-width student on one input.
//!
//! `cargo run --release --example bench -- [dim] [reps]`

use mcakd::csi_data::{generate_channel, normalize, ChannelGenConfig};
use mcakd::eval::{bench, TaskSpec};
use mcakd::model::{ModelConfig, ModelState, Role};
use mcakd::tokenize_mask::PatchSpec;

fn main() -> mcakd::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(128);
    let reps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);

    let teacher_cfg = ModelConfig {
        depth_enc: 4,
        depth_dec: 2,
        heads: 4,
        dim,
        mlp_ratio: 4.0,
        patch: PatchSpec::new(2, 2, 2),
        max_tokens: 256,
    };
    let student_cfg = ModelConfig { dim: dim / 2, ..teacher_cfg.clone() };
    let h = normalize(&generate_channel(&ChannelGenConfig::default(), 0)?)?.0;
    let task = TaskSpec::time(h.dims().0 / 2);

    let mut means = Vec::new();
    for (name, cfg) in [("teacher", &teacher_cfg), ("student", &student_cfg)] {
        let state = ModelState::<f32>::init(cfg, Role::Student, 0)?;
        let s = bench(&state, &h, &task, 1, reps, 3)?;
        println!(
            "{name}: D={:4} params {:>9}  mean {:.3} ms  p50 {:.3}  p95 {:.3}",
            cfg.dim,
            state.num_params(),
            s.mean_ms,
            s.p50_ms,
            s.p95_ms
        );
        means.push(s.mean_ms);
    }
    println!("student/teacher latency {:.2}", means[1] / means[0]);
    Ok(())
}
