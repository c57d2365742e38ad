//! Networks around the denoiser: the linear autoencoder that compresses
//! teacher features, the student projection into the latent space, and the
//! adaptive noise-matching module.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{silu, Conv2d, ConvOpts, Linear, ParamBuilder, ParamMode};

/// `γ` is squashed into `[GAMMA_MARGIN, 1 − GAMMA_MARGIN]` so it never
/// touches the interval ends, even where a plain sigmoid saturates in f32.
pub const GAMMA_MARGIN: f64 = 1e-6;

/// Affine map over the channel dimension of a rank-2 or rank-4 tensor.
#[derive(Debug, Clone)]
struct ChannelMap {
    conv: Conv2d,
}

impl ChannelMap {
    fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, in_ch, out_ch, ConvOpts::pointwise())?,
        })
    }

    fn identity(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let eye = Tensor::eye(channels, pb.dtype(), pb.device())?.reshape((channels, channels, 1, 1))?;
        let weight = pb.get_with_value("weight", &eye)?;
        let bias = pb.get_with_value("bias", &Tensor::zeros(channels, pb.dtype(), pb.device())?)?;
        Ok(Self {
            conv: Conv2d::from_parts(weight, Some(bias), 1, 0),
        })
    }

    fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    fn forward(&self, stage: &'static str, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        if !(x.rank() == 2 || x.rank() == 4) || x.dim(1)? != self.in_channels() {
            return Err(Error::shape(
                stage,
                format!("expected (N, {}[, H, W]), got {:?}", self.in_channels(), x.dims()),
            ));
        }
        if x.rank() == 2 {
            let y = self.conv.forward(&x.unsqueeze(2)?.unsqueeze(3)?, mode)?;
            Ok(y.squeeze(3)?.squeeze(2)?)
        } else {
            self.conv.forward(x, mode)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub in_channels: usize,
    pub latent_channels: usize,
}

/// Two 1×1 convolutions: encoder `C → L`, decoder `L → C`. No nonlinearity.
#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    encoder: ChannelMap,
    decoder: ChannelMap,
}

impl LinearAutoencoder {
    pub fn new(pb: &ParamBuilder, spec: AutoencoderSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.latent_channels == 0 {
            return Err(Error::param("latent_channels", "channel counts must be positive"));
        }
        Ok(Self {
            encoder: ChannelMap::new(&pb.pp("encoder"), spec.in_channels, spec.latent_channels)?,
            decoder: ChannelMap::new(&pb.pp("decoder"), spec.latent_channels, spec.in_channels)?,
        })
    }

    /// Square autoencoder whose encoder and decoder are both the identity.
    pub fn identity(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            encoder: ChannelMap::identity(&pb.pp("encoder"), channels)?,
            decoder: ChannelMap::identity(&pb.pp("decoder"), channels)?,
        })
    }

    pub fn spec(&self) -> AutoencoderSpec {
        AutoencoderSpec {
            in_channels: self.encoder.in_channels(),
            latent_channels: self.encoder.out_channels(),
        }
    }

    /// Latent teacher feature, detached from the encoder parameters.
    pub fn encode(&self, teacher_feature: &Tensor) -> Result<Tensor> {
        Ok(self.encode_tracked(teacher_feature)?.detach())
    }

    /// Latent teacher feature with gradient to the encoder.
    pub fn encode_tracked(&self, teacher_feature: &Tensor) -> Result<Tensor> {
        self.encoder.forward("autoencoder encode", teacher_feature, ParamMode::Tracked)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.decoder.forward("autoencoder decode", latent, ParamMode::Tracked)
    }

    /// Mean squared error between `decode(encode(x))` and `x`.
    pub fn reconstruction_loss(&self, teacher_feature: &Tensor) -> Result<Tensor> {
        let recon = self.decode(&self.encode_tracked(teacher_feature)?)?;
        crate::distance::mse_distance(&recon, teacher_feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Maps student features into the teacher latent space.
#[derive(Debug, Clone)]
pub struct StudentProjection {
    map: ChannelMap,
}

impl StudentProjection {
    pub fn new(pb: &ParamBuilder, spec: ProjectionSpec) -> Result<Self> {
        Ok(Self {
            map: ChannelMap::new(pb, spec.in_channels, spec.out_channels)?,
        })
    }

    pub fn spec(&self) -> ProjectionSpec {
        ProjectionSpec {
            in_channels: self.map.in_channels(),
            out_channels: self.map.out_channels(),
        }
    }

    pub fn weight(&self) -> &Tensor {
        self.map.conv.weight()
    }

    pub fn forward(&self, student_feature: &Tensor) -> Result<Tensor> {
        self.map.forward("student projection", student_feature, ParamMode::Tracked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseAdapterSpec {
    pub channels: usize,
    /// `true` for `(N, C, H, W)` latents, `false` for `(N, C)` vectors.
    pub spatial: bool,
}

/// Predicts one fusion weight `γ ∈ (0, 1)` per sample.
#[derive(Debug, Clone)]
pub struct NoiseAdapter {
    spec: NoiseAdapterSpec,
    trunk: Trunk,
    head: Linear,
}

#[derive(Debug, Clone)]
enum Trunk {
    Conv(Conv2d),
    Dense(Linear),
}

impl NoiseAdapter {
    pub fn new(pb: &ParamBuilder, spec: NoiseAdapterSpec) -> Result<Self> {
        let c = spec.channels;
        let trunk = if spec.spatial {
            Trunk::Conv(Conv2d::new(&pb.pp("conv"), c, c, ConvOpts::same3x3())?)
        } else {
            Trunk::Dense(Linear::new(&pb.pp("fc"), c, c)?)
        };
        Ok(Self {
            spec,
            trunk,
            head: Linear::new(&pb.pp("head"), c, 1)?,
        })
    }

    pub fn spec(&self) -> NoiseAdapterSpec {
        self.spec
    }

    /// Per-sample `γ` with shape `(N,)`.
    pub fn gamma(&self, student_latent: &Tensor) -> Result<Tensor> {
        let expected_rank = if self.spec.spatial { 4 } else { 2 };
        if student_latent.rank() != expected_rank || student_latent.dim(1)? != self.spec.channels {
            return Err(Error::shape(
                "noise adapter",
                format!(
                    "expected rank {expected_rank} with {} channels, got {:?}",
                    self.spec.channels,
                    student_latent.dims()
                ),
            ));
        }
        let pooled = match &self.trunk {
            Trunk::Conv(conv) => silu(&conv.forward(student_latent, ParamMode::Tracked)?)?
                .mean(3)?
                .mean(2)?,
            Trunk::Dense(fc) => silu(&fc.forward(student_latent, ParamMode::Tracked)?)?,
        };
        let logit = self.head.forward(&pooled, ParamMode::Tracked)?.squeeze(1)?;
        let squashed = candle_nn::ops::sigmoid(&logit)?;
        Ok(((squashed * (1.0 - 2.0 * GAMMA_MARGIN))? + GAMMA_MARGIN)?)
    }

    /// `γ·Z + (1 − γ)·ε` with a learned `γ`; returns the fused latent and `γ`.
    pub fn match_noise(&self, student_latent: &Tensor, epsilon_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let gamma = self.gamma(student_latent)?;
        let fused = fuse_with_noise(student_latent, epsilon_t, &gamma)?;
        Ok((fused, gamma))
    }
}

/// `γ·Z + (1 − γ)·ε` with `γ` of shape `(N,)` broadcast over each sample.
pub fn fuse_with_noise(latent: &Tensor, epsilon: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    if latent.dims() != epsilon.dims() {
        return Err(Error::shape(
            "match_noise",
            format!("latent {:?} vs noise {:?}", latent.dims(), epsilon.dims()),
        ));
    }
    let n = latent.dim(0)?;
    if gamma.dims() != [n] {
        return Err(Error::shape("match_noise", format!("gamma {:?} for batch of {n}", gamma.dims())));
    }
    let mut shape = vec![1usize; latent.rank()];
    shape[0] = n;
    let g = gamma.reshape(shape)?;
    let one_minus = g.affine(-1.0, 1.0)?;
    Ok((latent.broadcast_mul(&g)? + epsilon.broadcast_mul(&one_minus)?)?)
}

/// Constant `γ` for every sample, mainly for ablations and tests.
pub fn constant_gamma(n: usize, value: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::full(value, n, device)?.to_dtype(dtype)?)
}
