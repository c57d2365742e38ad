//! Accuracy against the number of denoiser evaluations, with a shared teacher.
//!
//! ```text
//! cargo run --release --example nfe_ablation [-- 1,2,5]
//! ```

use std::path::PathBuf;

use diffkd::ablation::{self, Axis};
use diffkd::config::ExperimentConfig;

fn main() -> diffkd::Result<()> {
    let values: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "1,5".into())
        .split(',')
        .map(|v| v.trim().parse().expect("comma-separated integers"))
        .collect();
    let out = PathBuf::from("out/nfe_ablation");
    let mut cfg = ExperimentConfig::from_file(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml"))?;
    cfg.teacher.checkpoint = out.join("teacher.safetensors");

    let rows = ablation::run(&cfg, Axis::Nfe, &values, &[0], &out)?;
    ablation::write_table(&rows, Axis::Nfe, &out.join("nfe.csv"))?;
    println!("{:>4} {:>8}", "nfe", "top1");
    for (nfe, top1, _, _) in ablation::summarize(&rows) {
        println!("{nfe:>4} {top1:>8.2}");
    }
    Ok(())
}
