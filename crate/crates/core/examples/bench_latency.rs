//! Time 512x512 inference with the default-width model.
//!
//! ```bash
//! cargo run --release --example bench_latency -- 20
//! ```

use lowdose::benchkit::{bench_inference, throughput_check};
use lowdose::cli::bench_image;
use lowdose::tensor::{ModelCheckpoint, UNet, DEFAULT_BASE_WIDTH};

fn main() -> lowdose::Result<()> {
    lowdose::tensor::retain_freed_memory();
    let samples = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let ckpt = ModelCheckpoint::new(UNet::new(DEFAULT_BASE_WIDTH, 0)?);
    let img = bench_image(512)?;
    let report = bench_inference(&ckpt, &img, 3, samples, "example run")?;
    report.check_consistency(samples)?;
    println!(
        "{:.1} +/- {:.1} ms per image ({} threads)",
        report.mean_ms, report.std_ms, report.threads
    );
    for fps in [5.0, 25.0] {
        println!(
            "{fps} frames/s: {:?}",
            throughput_check(&report, 1000.0 / fps)?
        );
    }
    Ok(())
}
