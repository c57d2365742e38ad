//! Sweeps over one factor with a shared teacher.

use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::diffkd::FeatureTap;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::train::{ensure_teacher, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Denoiser evaluations per reverse chain.
    Nfe,
    /// Latent channels of the backbone autoencoder.
    AeDim,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Nfe => "nfe",
            Axis::AeDim => "ae_dim",
        }
    }

    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: usize) -> Result<ExperimentConfig> {
        let mut cfg = config.clone();
        match self {
            Axis::Nfe => cfg.diffkd.nfe = value,
            Axis::AeDim => {
                let mut found = false;
                for h in cfg.heads.iter_mut().filter(|h| h.feature_tap == FeatureTap::Backbone) {
                    h.use_autoencoder = true;
                    h.latent_channels = Some(value);
                    found = true;
                }
                if !found {
                    return Err(Error::Config("ae-dim ablation needs a backbone head".into()));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: usize,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Trains one student per `(value, seed)` pair, sequentially. Each run writes
/// its metrics and checkpoint under `out_dir/<axis><value>_seed<seed>/`; the
/// teacher checkpoint is provisioned once and shared.
pub fn run(config: &ExperimentConfig, axis: Axis, values: &[usize], seeds: &[u64], out_dir: &Path) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("ablation needs at least one value and one seed".into()));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(config, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    ensure_teacher(config)?;
    let mut rows = Vec::new();
    for (value, cfg) in configs {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let dir = out_dir.join(format!("{}{value}_seed{seed}", axis.name()));
            cfg.logging.metrics_path = dir.join("metrics.jsonl");
            cfg.logging.checkpoint_path = dir.join("student.safetensors");
            let EvalResult { top1, top5 } = train(cfg)?.eval;
            rows.push(AblationRow { value, seed, top1, top5 });
        }
    }
    Ok(rows)
}

/// Per-value means, in first-seen order: `(value, mean top1, mean top5, runs)`.
pub fn summarize(rows: &[AblationRow]) -> Vec<(usize, f64, f64, usize)> {
    let mut out: Vec<(usize, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|s| s.0 == r.value) {
            Some(s) => {
                s.1 += r.top1;
                s.2 += r.top5;
                s.3 += 1;
            }
            None => out.push((r.value, r.top1, r.top5, 1)),
        }
    }
    for s in &mut out {
        s.1 /= s.3 as f64;
        s.2 /= s.3 as f64;
    }
    out
}

/// Writes all runs as CSV.
pub fn write_table(rows: &[AblationRow], axis: Axis, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([axis.name(), "seed", "top1", "top5"]).map_err(io)?;
    for r in rows {
        w.write_record([r.value.to_string(), r.seed.to_string(), format!("{:.2}", r.top1), format!("{:.2}", r.top5)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
