//! γ histogram and mean-γ-per-epoch curve from a training metrics log.
//!
//! ```text
//! cargo run --release --example gamma_stats -- out/train_synthetic/diffkd.jsonl
//! ```

use std::path::PathBuf;

use diffkd::metrics::{read_metrics, GAMMA_BUCKETS};
use diffkd::viz::gamma_histogram;

fn main() -> diffkd::Result<()> {
    let log = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/train_synthetic/diffkd.jsonl".into()),
    );
    let figs = gamma_histogram(&read_metrics(&log)?, &PathBuf::from("out/gamma"))?;
    let total: u64 = figs.report.buckets.iter().sum();
    for (i, c) in figs.report.buckets.iter().enumerate() {
        let lo = i as f64 / GAMMA_BUCKETS as f64;
        let bar = "#".repeat((40 * c / total.max(1)) as usize);
        println!("[{lo:.1}, {:.1}) {c:>7} {bar}", lo + 0.1);
    }
    for (epoch, mean) in &figs.report.epoch_means {
        println!("epoch {epoch}: mean gamma {mean:.4}");
    }
    println!("figures in {}", figs.histogram_png.parent().unwrap().display());
    Ok(())
}
