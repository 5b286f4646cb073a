//! Synthesizes a small CSI dataset, prints per-split energy statistics and
//! saves it under the system temp dir.
//!
//! `cargo run --example generate_data -- [samples] [max_doppler_hz]`

use mcakd::csi_data::{
    draw_paths, generate_dataset, load_dataset, save_dataset, ChannelGenConfig, NormalizationMode, Split, SplitCounts,
};

fn main() -> mcakd::Result<()> {
    let mut args = std::env::args().skip(1);
    let samples: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(64);
    let doppler: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(50.0);

    let gen = ChannelGenConfig {
        max_doppler: doppler,
        seed: 7,
        ..ChannelGenConfig::default()
    };
    for (i, p) in draw_paths(&gen, 0).iter().enumerate() {
        println!(
            "path {i}: |a| {:.3}  doppler {:+7.2} Hz  delay {:6.1} ns",
            p.gain.norm(),
            p.doppler_hz,
            p.delay_s * 1e9
        );
    }

    let counts = SplitCounts {
        train: samples,
        val: samples / 4,
        test: samples / 4,
    };
    let ds = generate_dataset(&gen, counts, NormalizationMode::Global)?;
    println!("dims (T, K, N) = {:?}, {} samples", ds.dims, ds.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let e: Vec<f64> = ds.split(split).iter().map(|h| h.frobenius_sq() / h.len() as f64).collect();
        let mean = e.iter().sum::<f64>() / e.len().max(1) as f64;
        println!("{split:?}: {} samples, mean entry energy {mean:.4}", e.len());
    }

    let dir = std::env::temp_dir().join("mcakd-generate-data");
    let stem = dir.join("dataset");
    save_dataset(&ds, &stem)?;
    let back = load_dataset(&stem)?;
    assert_eq!(back.samples, ds.samples);
    println!("saved and reloaded {}", stem.display());
    Ok(())
}
