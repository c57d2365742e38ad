//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries the format version, run state, RNG state and config snapshot.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;

pub const FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_STATE: &str = "state";
const KEY_CONFIG: &str = "config";
const KEY_RNG: &str = "rng";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

/// Everything besides tensors that a checkpoint records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub kind: CheckpointKind,
    pub arch: String,
    pub in_channels: usize,
    pub classes: usize,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Accuracy measured when the checkpoint was written.
    pub recorded: Option<EvalResult>,
    /// Fingerprint of the frozen teacher used for distillation.
    pub teacher_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: CheckpointState,
    pub config: ExperimentConfig,
    /// Serialized training RNG (JSON).
    pub rng: Option<String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut meta = HashMap::new();
        meta.insert(KEY_VERSION.to_string(), FORMAT_VERSION.to_string());
        meta.insert(
            KEY_STATE.to_string(),
            serde_json::to_string(&self.state).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        meta.insert(KEY_CONFIG.to_string(), self.config.to_toml_string()?);
        if let Some(rng) = &self.rng {
            meta.insert(KEY_RNG.to_string(), rng.clone());
        }
        let mut entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        safetensors::tensor::serialize_to_file(entries, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: String| Error::Checkpoint(format!("{}: {what}", path.display()));
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(format!("not a checkpoint ({e})")))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata".into()))?;
        let version: u32 = meta
            .get(KEY_VERSION)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        let state: CheckpointState = serde_json::from_str(meta.get(KEY_STATE).ok_or_else(|| bad("missing state".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let config = ExperimentConfig::from_toml_str(meta.get(KEY_CONFIG).ok_or_else(|| bad("missing config".into()))?)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        Ok(Self {
            state,
            config,
            rng: meta.get(KEY_RNG).cloned(),
            tensors,
        })
    }
}
