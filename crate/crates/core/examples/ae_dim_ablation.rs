//! Accuracy against the autoencoder latent width.
//!
//! ```text
//! cargo run --release --example ae_dim_ablation [-- 16,32,64]
//! ```

use std::path::PathBuf;

use diffkd::ablation::{self, Axis};
use diffkd::config::ExperimentConfig;

fn main() -> diffkd::Result<()> {
    let values: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "16,32".into())
        .split(',')
        .map(|v| v.trim().parse().expect("comma-separated integers"))
        .collect();
    let out = PathBuf::from("out/ae_dim_ablation");
    let mut cfg = ExperimentConfig::from_file(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml"))?;
    cfg.teacher.checkpoint = out.join("teacher.safetensors");

    let rows = ablation::run(&cfg, Axis::AeDim, &values, &[0], &out)?;
    ablation::write_table(&rows, Axis::AeDim, &out.join("ae_dim.csv"))?;
    for (dim, top1, _, _) in ablation::summarize(&rows) {
        println!("latent {dim:>4}: top1 {top1:.2}");
    }
    Ok(())
}
