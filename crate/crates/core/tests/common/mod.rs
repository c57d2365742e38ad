//! Tiny configurations shared by the integration tests.

#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use diffkd::config::{ExperimentConfig, LrSchedule};
use diffkd::data::DatasetKind;
use diffkd::diffkd::{FeatureTap, HeadConfig};
use diffkd::distance::DistanceKind;

/// Synthetic 8×8 task, 4-wide teacher and 2-wide student, paths under `dir`.
pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::Synthetic;
    cfg.dataset.synthetic.train_samples = 160;
    cfg.dataset.synthetic.eval_samples = 80;
    cfg.dataset.synthetic.image_size = 8;
    cfg.teacher.arch = "resnet8-w4".into();
    cfg.teacher.epochs = 2;
    cfg.teacher.checkpoint = dir.join("teacher.safetensors");
    cfg.student.arch = "resnet8-w2".into();
    cfg.training.epochs = 2;
    cfg.training.batch_size = 32;
    cfg.training.lr_schedule = LrSchedule::Cosine;
    cfg.diffkd.nfe = 2;
    cfg.heads = vec![HeadConfig::feature_mse()];
    cfg.logging.interval = 2;
    cfg.logging.metrics_path = dir.join("metrics.jsonl");
    cfg.logging.checkpoint_path = dir.join("student.safetensors");
    cfg
}

pub fn ae_head(latent: usize) -> HeadConfig {
    HeadConfig {
        feature_tap: FeatureTap::Backbone,
        use_autoencoder: true,
        latent_channels: Some(latent),
        distance: DistanceKind::Mse,
        temperature: 1.0,
    }
}

/// Writes `cfg` as TOML to `path`.
pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml_string().unwrap()).unwrap();
}
