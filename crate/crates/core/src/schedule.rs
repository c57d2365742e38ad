//! Forward noising and the deterministic DDIM reverse step.
//!
//! All schedule arrays are kept in `f64`. Tensors are combined with the
//! schedule coefficients through scalar affine ops, so the network precision
//! is whatever dtype the incoming tensor already has.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOTAL_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INITIAL_TIMESTEP: usize = 500;
pub const DEFAULT_NFE: usize = 5;

/// Variance schedule of the forward diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `total_timesteps`.
    pub fn linear(total_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_timesteps == 0 {
            return Err(Error::param("total_timesteps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end < 1.0) || beta_end < beta_start {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} must satisfy beta_start <= beta_end < 1"),
            ));
        }
        let betas = if total_timesteps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (total_timesteps - 1) as f64;
            (0..total_timesteps)
                .map(|i| beta_start + step * i as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("betas", "schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("betas", format!("beta {b} not in (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn total_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Index {
            what: "noise schedule",
            index: t,
            len: self.alpha_bars.len(),
        })
    }

    /// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·ε`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, epsilon: &Tensor) -> Result<Tensor> {
        check_same_shape("add_noise", z0, epsilon)?;
        let ab = self.alpha_bar(t)?;
        Ok(((z0 * ab.sqrt())? + (epsilon * (1.0 - ab).sqrt())?)?)
    }

    /// Forward noising with a separate timestep for each sample along dim 0.
    pub fn add_noise_per_sample(
        &self,
        z0: &Tensor,
        timesteps: &[usize],
        epsilon: &Tensor,
    ) -> Result<Tensor> {
        check_same_shape("add_noise", z0, epsilon)?;
        let n = z0.dim(0)?;
        if timesteps.len() != n {
            return Err(Error::shape(
                "add_noise",
                format!("{} timesteps for batch of {n}", timesteps.len()),
            ));
        }
        let mut signal = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for &t in timesteps {
            let ab = self.alpha_bar(t)?;
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        let signal = per_sample_column(&signal, z0)?;
        let noise = per_sample_column(&noise, z0)?;
        Ok((z0.broadcast_mul(&signal)? + epsilon.broadcast_mul(&noise)?)?)
    }

    /// Deterministic (σ = 0) DDIM update from `t` to `t_next`.
    ///
    /// `t_next == 0` is the terminal step and returns the clean estimate x̂0.
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        predicted_noise: &Tensor,
        t: usize,
        t_next: usize,
    ) -> Result<Tensor> {
        check_same_shape("ddim_step", z_t, predicted_noise)?;
        if t_next >= t {
            return Err(Error::param(
                "t_next",
                format!("must be strictly below t (got t={t}, t_next={t_next})"),
            ));
        }
        let x0 = self.predict_x0(z_t, predicted_noise, t)?;
        if t_next == 0 {
            return Ok(x0);
        }
        let ab_next = self.alpha_bar(t_next)?;
        Ok(((x0 * ab_next.sqrt())? + (predicted_noise * (1.0 - ab_next).sqrt())?)?)
    }

    /// x̂0 = (z_t − sqrt(1 − ᾱ_t)·ε̂) / sqrt(ᾱ_t).
    pub fn predict_x0(&self, z_t: &Tensor, predicted_noise: &Tensor, t: usize) -> Result<Tensor> {
        check_same_shape("predict_x0", z_t, predicted_noise)?;
        let ab = self.alpha_bar(t)?;
        let num = (z_t - (predicted_noise * (1.0 - ab).sqrt())?)?;
        Ok((num * (1.0 / ab.sqrt()))?)
    }

    /// Uniform reverse-chain plan starting at `initial_timestep` with `nfe` evaluations.
    pub fn sampling_plan(&self, initial_timestep: usize, nfe: usize) -> Result<SamplingPlan> {
        SamplingPlan::new(self.total_timesteps(), initial_timestep, nfe)
    }
}

/// Timesteps visited by the reverse chain.
///
/// `timesteps` holds the `nfe` points at which the denoiser is evaluated;
/// each step moves to the next entry and the final step lands on 0, which
/// yields the clean estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub initial_timestep: usize,
    pub nfe: usize,
    pub interval: usize,
    pub timesteps: Vec<usize>,
    /// Transition standard deviation; always 0 for the deterministic sampler.
    pub sigma: f64,
}

impl SamplingPlan {
    pub fn new(total_timesteps: usize, initial_timestep: usize, nfe: usize) -> Result<Self> {
        if initial_timestep == 0 || initial_timestep >= total_timesteps {
            return Err(Error::param(
                "initial_timestep",
                format!("{initial_timestep} not in (0, {total_timesteps})"),
            ));
        }
        if nfe == 0 || nfe > initial_timestep {
            return Err(Error::param(
                "nfe",
                format!("{nfe} not in [1, initial_timestep={initial_timestep}]"),
            ));
        }
        let interval = initial_timestep / nfe;
        let timesteps = (0..nfe).map(|i| initial_timestep - i * interval).collect();
        Ok(Self {
            initial_timestep,
            nfe,
            interval,
            timesteps,
            sigma: 0.0,
        })
    }

    /// `(t, t_next)` pairs in chain order; the last `t_next` is 0.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps.iter().enumerate().map(|(i, &t)| {
            let next = self.timesteps.get(i + 1).copied().unwrap_or(0);
            (t, next)
        })
    }
}

fn check_same_shape(stage: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            stage,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `(n, 1, 1, ...)` tensor holding one coefficient per sample.
pub(crate) fn per_sample_column(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::new(values, like.device())?
        .to_dtype(like.dtype())?
        .reshape(shape)?)
}
