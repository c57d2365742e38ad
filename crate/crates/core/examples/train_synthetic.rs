//! End-to-end desk-scale distillation on the synthetic image task.
//!
//! Trains (or reuses) the teacher, then the DiffKD student and the plain
//! feature-MSE baseline from the same seed, and compares them.
//!
//! ```text
//! cargo run --release --example train_synthetic [-- <out dir>]
//! ```

use std::path::PathBuf;

use diffkd::config::ExperimentConfig;
use diffkd::train::{ensure_teacher, train};

fn main() -> diffkd::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/train_synthetic".into()));
    let mut cfg = ExperimentConfig::from_file(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml"))?;
    cfg.teacher.checkpoint = out.join("teacher.safetensors");

    let teacher = ensure_teacher(&cfg)?;
    println!("teacher {}: top1 {:.2}", cfg.teacher.arch, teacher.top1);

    for (name, denoise) in [("diffkd", true), ("baseline", false)] {
        let mut run = cfg.clone();
        run.diffkd.denoise = denoise;
        run.logging.metrics_path = out.join(format!("{name}.jsonl"));
        run.logging.checkpoint_path = out.join(format!("{name}.safetensors"));
        let summary = train(run)?;
        println!(
            "{name:>8}: top1 {:.2}  top5 {:.2}  (teacher unchanged: {})",
            summary.eval.top1,
            summary.eval.top5,
            summary.teacher_fingerprint_before == summary.teacher_fingerprint_after
        );
    }
    Ok(())
}
