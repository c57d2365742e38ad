//! SGD with momentum and L2 weight decay.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};

/// `buf ← μ·buf + (g + λ·p)`, `p ← p − lr·buf`.
///
/// Parameters without a gradient in the current step are left untouched,
/// weight decay included.
#[derive(Debug)]
pub struct Sgd {
    params: Vec<(String, Var)>,
    /// Per-parameter learning-rate multipliers.
    scales: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, cfg: &OptimizerConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::param("momentum", format!("{} not in [0, 1)", cfg.momentum)));
        }
        if cfg.weight_decay < 0.0 {
            return Err(Error::param("weight_decay", "must be >= 0"));
        }
        Ok(Self {
            scales: vec![1.0; params.len()],
            params,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            buffers: BTreeMap::new(),
        })
    }

    /// Multiplies the learning rate of every parameter named `prefix*`.
    pub fn scale_group(&mut self, prefix: &str, scale: f64) {
        for ((name, _), s) in self.params.iter().zip(&mut self.scales) {
            if name.starts_with(prefix) {
                *s = scale;
            }
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for ((name, var), &scale) in self.params.iter().zip(&self.scales) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // leaf gradients still reference the forward graph; keeping them
            // in momentum buffers would pin every step's activations
            let g = g.detach();
            let p = var.as_tensor().detach();
            let g = if self.weight_decay > 0.0 {
                (g + (&p * self.weight_decay)?)?
            } else {
                g
            };
            let update = if self.momentum > 0.0 {
                let buf = match self.buffers.get(name) {
                    Some(b) => ((b * self.momentum)? + g)?,
                    None => g,
                };
                self.buffers.insert(name.clone(), buf.clone());
                buf
            } else {
                g
            };
            var.set(&(p - (update * (lr * scale))?)?)?;
        }
        Ok(())
    }

    /// Momentum buffers keyed `prefix + parameter name`.
    pub fn state(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.buffers
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.buffers.clear();
        for (name, var) in &self.params {
            if let Some(t) = tensors.get(&format!("{prefix}{name}")) {
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("momentum buffer for `{name}` has wrong shape")));
                }
                self.buffers.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        Ok(())
    }
}
