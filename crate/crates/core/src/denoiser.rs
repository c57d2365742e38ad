//! Timestep-conditioned noise predictor.
//!
//! Two variants share one interface: a spatial network of residual
//! bottleneck blocks for `(N, C, H, W)` feature maps and a two-layer MLP for
//! `(N, C)` vectors such as logits. The timestep enters through a sinusoidal
//! embedding that drives a per-channel scale and shift inside every block.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{default_groups, silu, Conv2d, ConvOpts, GroupNorm, Linear, ParamBuilder, ParamMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserVariant {
    Spatial,
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub variant: DenoiserVariant,
    pub in_channels: usize,
    /// Bottleneck width (spatial) or MLP hidden width (vector).
    /// Defaults to `in_channels / 4` and `max(in_channels, 256)` respectively.
    pub hidden_channels: Option<usize>,
    pub timestep_embed_dim: usize,
    /// Group count for the spatial variant's normalization layers.
    pub groups: Option<usize>,
    pub blocks: usize,
    /// Zero the output layer so an untrained network predicts zero noise.
    pub zero_init_output: bool,
}

impl DenoiserSpec {
    pub fn spatial(in_channels: usize) -> Self {
        Self {
            variant: DenoiserVariant::Spatial,
            in_channels,
            hidden_channels: None,
            timestep_embed_dim: 128,
            groups: None,
            blocks: 2,
            zero_init_output: true,
        }
    }

    pub fn vector(in_channels: usize) -> Self {
        Self {
            variant: DenoiserVariant::Vector,
            blocks: 1,
            ..Self::spatial(in_channels)
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_channels.unwrap_or(match self.variant {
            DenoiserVariant::Spatial => (self.in_channels / 4).max(1),
            DenoiserVariant::Vector => self.in_channels.max(256),
        })
    }
}

/// Sinusoidal embedding: first half `sin(t·f_i)`, second half `cos(t·f_i)`,
/// with `f_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::param("dim", format!("embedding dim {dim} must be even and > 0")));
    }
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (sin, cos): (Vec<f64>, Vec<f64>) = freqs
        .map(|f| {
            let arg = t as f64 * f;
            (arg.sin(), arg.cos())
        })
        .unzip();
    Ok(sin.into_iter().chain(cos).collect())
}

fn embedding_batch(timesteps: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        rows.extend(timestep_embedding(t, dim)?);
    }
    Ok(Tensor::from_vec(rows, (timesteps.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// Scale-and-shift of `h` from a `(N, 2·width)` conditioning vector.
fn modulate(h: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let width = cond.dim(1)? / 2;
    let scale = cond.narrow(1, 0, width)?;
    let shift = cond.narrow(1, width, width)?;
    let (scale, shift) = if h.rank() == 4 {
        (scale.unsqueeze(2)?.unsqueeze(3)?, shift.unsqueeze(2)?.unsqueeze(3)?)
    } else {
        (scale, shift)
    };
    Ok(h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv2d,
    norm1: GroupNorm,
    film: Linear,
    conv: Conv2d,
    norm2: GroupNorm,
    expand: Conv2d,
}

impl Bottleneck {
    fn new(pb: &ParamBuilder, channels: usize, hidden: usize, groups: usize, embed: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&pb.pp("reduce"), channels, hidden, ConvOpts::pointwise())?,
            norm1: GroupNorm::new(&pb.pp("norm1"), groups, hidden)?,
            film: Linear::new(&pb.pp("film"), embed, 2 * hidden)?,
            conv: Conv2d::new(&pb.pp("conv"), hidden, hidden, ConvOpts::same3x3())?,
            norm2: GroupNorm::new(&pb.pp("norm2"), groups, hidden)?,
            expand: Conv2d::new(&pb.pp("expand"), hidden, channels, ConvOpts::pointwise())?,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let h = silu(&self.norm1.forward(&self.reduce.forward(x, mode)?, mode)?)?;
        let h = modulate(&h, &self.film.forward(emb, mode)?)?;
        let h = silu(&self.norm2.forward(&self.conv.forward(&h, mode)?, mode)?)?;
        Ok((x + self.expand.forward(&h, mode)?)?)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Spatial { blocks: Vec<Bottleneck>, out: Conv2d },
    Vector { fc1: Linear, film: Linear, fc2: Linear },
}

/// Noise-prediction network.
#[derive(Debug, Clone)]
pub struct Denoiser {
    spec: DenoiserSpec,
    embed: Linear,
    body: Body,
    evaluations: Arc<AtomicUsize>,
}

impl Denoiser {
    pub fn new(pb: &ParamBuilder, spec: DenoiserSpec) -> Result<Self> {
        if spec.in_channels == 0 {
            return Err(Error::param("in_channels", "must be positive"));
        }
        let embed_dim = spec.timestep_embed_dim;
        if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
            return Err(Error::param("timestep_embed_dim", format!("{embed_dim} must be even and > 0")));
        }
        let hidden = spec.hidden();
        let embed = Linear::new(&pb.pp("time_embed"), embed_dim, embed_dim)?;
        let body = match spec.variant {
            DenoiserVariant::Spatial => {
                let groups = spec.groups.unwrap_or_else(|| default_groups(hidden));
                let blocks = (0..spec.blocks.max(1))
                    .map(|i| Bottleneck::new(&pb.pp(format!("block{i}")), spec.in_channels, hidden, groups, embed_dim))
                    .collect::<Result<Vec<_>>>()?;
                let out_pb = pb.pp("out");
                let out = if spec.zero_init_output {
                    Conv2d::with_init(
                        &out_pb,
                        spec.in_channels,
                        spec.in_channels,
                        ConvOpts::pointwise(),
                        crate::nn::Init::Const(0.0),
                        crate::nn::Init::Const(0.0),
                    )?
                } else {
                    Conv2d::new(&out_pb, spec.in_channels, spec.in_channels, ConvOpts::pointwise())?
                };
                Body::Spatial { blocks, out }
            }
            DenoiserVariant::Vector => {
                let fc2_pb = pb.pp("fc2");
                Body::Vector {
                    fc1: Linear::new(&pb.pp("fc1"), spec.in_channels, hidden)?,
                    film: Linear::new(&pb.pp("film"), embed_dim, 2 * hidden)?,
                    fc2: if spec.zero_init_output {
                        Linear::zeros(&fc2_pb, hidden, spec.in_channels)?
                    } else {
                        Linear::new(&fc2_pb, hidden, spec.in_channels)?
                    },
                }
            }
        };
        Ok(Self {
            spec,
            embed,
            body,
            evaluations: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    /// Number of forward evaluations since construction or the last reset.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        let expected_rank = match self.spec.variant {
            DenoiserVariant::Spatial => 4,
            DenoiserVariant::Vector => 2,
        };
        if z.rank() != expected_rank || z.dim(1)? != self.spec.in_channels {
            return Err(Error::shape(
                "denoiser input",
                format!(
                    "{:?} variant expects rank {expected_rank} with {} channels, got {:?}",
                    self.spec.variant,
                    self.spec.in_channels,
                    z.dims()
                ),
            ));
        }
        Ok(())
    }

    /// Predicts the noise in `z_t` at a single shared timestep.
    pub fn predict_noise(&self, z_t: &Tensor, t: usize, mode: ParamMode) -> Result<Tensor> {
        self.check_input(z_t)?;
        let n = z_t.dim(0)?;
        self.predict_noise_per_sample(z_t, &vec![t; n], mode)
    }

    /// Predicts noise with one timestep per sample.
    pub fn predict_noise_per_sample(&self, z_t: &Tensor, timesteps: &[usize], mode: ParamMode) -> Result<Tensor> {
        self.check_input(z_t)?;
        if timesteps.len() != z_t.dim(0)? {
            return Err(Error::shape(
                "denoiser timesteps",
                format!("{} timesteps for batch of {}", timesteps.len(), z_t.dim(0)?),
            ));
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let emb = embedding_batch(timesteps, self.spec.timestep_embed_dim, z_t)?;
        let emb = silu(&self.embed.forward(&emb, mode)?)?;
        match &self.body {
            Body::Spatial { blocks, out } => {
                let mut h = z_t.clone();
                for block in blocks {
                    h = block.forward(&h, &emb, mode)?;
                }
                out.forward(&h, mode)
            }
            Body::Vector { fc1, film, fc2 } => {
                let h = fc1.forward(z_t, mode)?;
                let h = silu(&modulate(&h, &film.forward(&emb, mode)?)?)?;
                fc2.forward(&h, mode)
            }
        }
    }

    pub fn device(&self) -> &Device {
        self.embed.weight().device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Var};

    fn build(spec: DenoiserSpec) -> (ParamStore, Denoiser) {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, DType::F64, &Device::Cpu, 3);
        let d = Denoiser::new(&pb.pp("denoiser"), spec).unwrap();
        (store, d)
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(timestep_embedding(3, 7).is_err());
        assert_eq!(timestep_embedding(17, 16).unwrap(), timestep_embedding(17, 16).unwrap());
    }

    #[test]
    fn embedding_matches_direct_formula() {
        let e = timestep_embedding(500, 128).unwrap();
        for i in 0..64 {
            let f = 10000f64.powf(-(i as f64) / 64.0);
            assert!((e[i] - (500.0 * f).sin()).abs() < 1e-9);
            assert!((e[64 + i] - (500.0 * f).cos()).abs() < 1e-9);
        }
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn shapes_preserved() {
        let (store, d) = build(DenoiserSpec::spatial(64));
        assert!(store.parameter_count() > 0);
        let x = Tensor::randn(0f64, 1.0, (2, 64, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(d.predict_noise(&x, 10, ParamMode::Tracked).unwrap().dims(), &[2, 64, 8, 8]);
        let (_, d) = build(DenoiserSpec::vector(100));
        let x = Tensor::randn(0f64, 1.0, (4, 100), &Device::Cpu).unwrap();
        assert_eq!(d.predict_noise(&x, 10, ParamMode::Tracked).unwrap().dims(), &[4, 100]);
    }

    #[test]
    fn rejects_wrong_rank_and_channels() {
        let (_, d) = build(DenoiserSpec::spatial(8));
        let bad = Tensor::zeros((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(d.predict_noise(&bad, 0, ParamMode::Tracked), Err(Error::Shape { .. })));
        let bad = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(d.predict_noise(&bad, 0, ParamMode::Tracked), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_init_predicts_zero() {
        let (_, d) = build(DenoiserSpec::spatial(8));
        let x = Tensor::randn(0f64, 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        let y = d.predict_noise(&x, 100, ParamMode::Tracked).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn timestep_changes_output() {
        for spec in [DenoiserSpec::spatial(8), DenoiserSpec::vector(10)] {
            let spec = DenoiserSpec { zero_init_output: false, ..spec };
            let shape: Vec<usize> = match spec.variant {
                DenoiserVariant::Spatial => vec![2, 8, 4, 4],
                DenoiserVariant::Vector => vec![2, 10],
            };
            let (_, d) = build(spec);
            let x = Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap();
            let a = d.predict_noise(&x, 0, ParamMode::Tracked).unwrap();
            let b = d.predict_noise(&x, 999, ParamMode::Tracked).unwrap();
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn counts_evaluations() {
        let (_, d) = build(DenoiserSpec::vector(4));
        let x = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        for _ in 0..3 {
            d.predict_noise(&x, 1, ParamMode::Frozen).unwrap();
        }
        assert_eq!(d.evaluations(), 3);
        d.reset_evaluations();
        assert_eq!(d.evaluations(), 0);
    }

    #[test]
    fn frozen_mode_routes_gradient_to_input_only() {
        let (store, d) = build(DenoiserSpec { zero_init_output: false, ..DenoiserSpec::vector(6) });
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 6), &Device::Cpu).unwrap()).unwrap();
        let y = d.predict_noise(x.as_tensor(), 7, ParamMode::Frozen).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        for (name, var) in store.trainable() {
            assert!(grads.get(var.as_tensor()).is_none(), "{name} received gradient");
        }
    }
}
