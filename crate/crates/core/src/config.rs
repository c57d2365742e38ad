//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::diffkd::{DiffKdConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::models::ArchSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Named classification training recipes. Only the CIFAR/ImageNet SGD
/// recipes are executable; the others are recognized so configs that name
/// them fail with a clear message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// SGD, step decay ×0.1, crop + flip.
    A1,
    /// SGD, step decay ×0.1 every 30 epochs, crop + flip.
    B1,
    /// RMSProp with EMA, RandAugment and random erasing.
    B2,
    /// AdamW, cosine, Mixup and CutMix.
    B3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the distillation modules, which share
    /// the student's optimizer.
    pub heads_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            heads_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch.
    MultiStep { milestones: Vec<usize>, gamma: f64 },
    /// Cosine decay to zero over the run.
    #[default]
    Cosine,
}


impl LrSchedule {
    /// Learning rate for the zero-based `epoch` of an `epochs`-long run.
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::MultiStep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Cosine => {
                let progress = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub arch: String,
    pub checkpoint: PathBuf,
    /// Epochs used when the teacher has to be trained first.
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: "resnet56".into(),
            checkpoint: PathBuf::from("teacher.safetensors"),
            epochs: 30,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub arch: String,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            arch: "resnet20".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            // 150/180/210 of 240, scaled to the epoch budget
            lr_schedule: LrSchedule::MultiStep {
                milestones: vec![19, 23, 26],
                gamma: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    /// Emit a step record every `interval` optimizer steps.
    pub interval: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Also write `<checkpoint stem>.epoch<N>.safetensors` after every epoch.
    pub keep_epoch_checkpoints: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            interval: 50,
            metrics_path: PathBuf::from("metrics.jsonl"),
            checkpoint_path: PathBuf::from("student.safetensors"),
            keep_epoch_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub strategy: Option<Strategy>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub diffkd: DiffKdConfig,
    pub heads: Vec<HeadConfig>,
    pub logging: LoggingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            strategy: None,
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            diffkd: DiffKdConfig::default(),
            heads: vec![HeadConfig::feature_mse(), HeadConfig::logits_kl()],
            logging: LoggingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.teacher.checkpoint);
        fix(&mut self.logging.metrics_path);
        fix(&mut self.logging.checkpoint_path);
        if let Some(p) = self.dataset.path.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn teacher_arch(&self) -> Result<ArchSpec> {
        self.teacher.arch.parse()
    }

    pub fn student_arch(&self) -> Result<ArchSpec> {
        self.student.arch.parse()
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Some(Strategy::B2) | Some(Strategy::B3) => {
                return Err(Error::Config(format!(
                    "strategy {:?} (EMA / RandAugment / Mixup / CutMix pipelines) is recognized but not executable",
                    self.strategy.unwrap()
                )))
            }
            _ => {}
        }
        self.teacher_arch()?;
        self.student_arch()?;
        self.diffkd.validate()?;
        if self.training.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2 for batch statistics"));
        }
        if self.logging.interval == 0 {
            return Err(Error::param("interval", "logging interval must be positive"));
        }
        if self.diffkd.lambda_kd > 0.0 && self.heads.is_empty() {
            return Err(Error::Config("lambda_kd > 0 requires at least one [[heads]] entry".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(self.optimizer.heads_lr_scale > 0.0) || !self.optimizer.heads_lr_scale.is_finite() {
            return Err(Error::param("heads_lr_scale", "must be a finite value > 0"));
        }
        for h in &self.heads {
            if h.use_autoencoder && h.latent_channels.is_none() {
                return Err(Error::Config("a head with use_autoencoder needs latent_channels".into()));
            }
        }
        Ok(())
    }
}
