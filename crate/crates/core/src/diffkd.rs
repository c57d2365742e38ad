//! The distillation procedure: a diffusion model trained on teacher latents
//! denoises the (noise-matched) student latent, and the distance between the
//! denoised student latent and the teacher latent is the distillation loss.
//!
//! Gradient routing:
//! - teacher features are detached before anything touches them;
//! - the autoencoder sees gradient only from its reconstruction loss;
//! - the denoiser sees gradient only from the diffusion loss, unless
//!   [`DiffKdConfig::kd_updates_denoiser`] is set;
//! - projection and noise adapter are trained by the distillation loss.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    constant_gamma, fuse_with_noise, AutoencoderSpec, LinearAutoencoder, NoiseAdapter, NoiseAdapterSpec,
    ProjectionSpec, StudentProjection,
};
use crate::denoiser::{Denoiser, DenoiserSpec};
use crate::distance::{Distance, DistanceKind};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, ParamBuilder, ParamMode};
use crate::random::randn_like;
use crate::schedule::{NoiseSchedule, SamplingPlan};

/// Anything that predicts the noise contained in `z_t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, timesteps: &[usize]) -> Result<Tensor>;
}

/// A [`Denoiser`] evaluated with a fixed [`ParamMode`].
#[derive(Debug, Clone, Copy)]
pub struct ModedDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub mode: ParamMode,
}

impl NoisePredictor for ModedDenoiser<'_> {
    fn predict(&self, z_t: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        self.denoiser.predict_noise_per_sample(z_t, timesteps, self.mode)
    }
}

/// `mean ‖ε − Φ(z_t, t)‖²` with `t ~ U[0, T)` per sample and `ε ~ N(0, I)`.
pub fn diffusion_loss(
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    teacher_latent: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let z0 = teacher_latent.detach();
    let n = z0.dim(0)?;
    let total = schedule.total_timesteps();
    let timesteps: Vec<usize> = (0..n).map(|_| rng.random_range(0..total)).collect();
    let eps = randn_like(&z0, rng)?;
    let z_t = schedule.add_noise_per_sample(&z0, &timesteps, &eps)?;
    let predicted = predictor.predict(&z_t, &timesteps)?;
    crate::distance::mse_distance(&predicted, &eps)
}

/// How the starting point of the reverse chain is formed from the student latent.
#[derive(Debug, Clone, Copy)]
pub enum NoiseMatching<'a> {
    /// Learned per-sample `γ`.
    Adaptive(&'a NoiseAdapter),
    /// The same `γ` for every sample.
    Fixed(f64),
    /// Start the chain from the student latent itself.
    Disabled,
}

/// Result of running the reverse chain on a student latent.
#[derive(Debug, Clone)]
pub struct Denoised {
    pub latent: Tensor,
    /// Per-sample `γ`, when noise matching is active.
    pub gamma: Option<Tensor>,
}

/// Noise-matches `student_latent` at `plan.initial_timestep` and runs the
/// deterministic reverse chain over `plan`.
pub fn denoise_latent(
    schedule: &NoiseSchedule,
    plan: &SamplingPlan,
    predictor: &dyn NoisePredictor,
    matching: NoiseMatching<'_>,
    student_latent: &Tensor,
    rng: &mut impl Rng,
) -> Result<Denoised> {
    if plan.initial_timestep >= schedule.total_timesteps() {
        return Err(Error::param("initial_timestep", "beyond the schedule horizon"));
    }
    let n = student_latent.dim(0)?;
    let (mut z, gamma) = match matching {
        NoiseMatching::Adaptive(adapter) => {
            let eps = randn_like(student_latent, rng)?;
            let (z, g) = adapter.match_noise(student_latent, &eps)?;
            (z, Some(g))
        }
        NoiseMatching::Fixed(value) => {
            let eps = randn_like(student_latent, rng)?;
            let g = constant_gamma(n, value, student_latent.dtype(), student_latent.device())?;
            (fuse_with_noise(student_latent, &eps, &g)?, Some(g))
        }
        NoiseMatching::Disabled => (student_latent.clone(), None),
    };
    for (t, t_next) in plan.steps() {
        let eps_hat = predictor.predict(&z, &vec![t; n])?;
        z = schedule.ddim_step(&z, &eps_hat, t, t_next)?;
    }
    Ok(Denoised { latent: z, gamma })
}

/// `d(denoised student latent, teacher latent)`; the teacher side is detached.
pub fn diffkd_loss(denoised_student: &Tensor, teacher_latent: &Tensor, distance: &Distance) -> Result<Tensor> {
    distance.compute(denoised_student, &teacher_latent.detach())
}

/// Global weights and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffKdConfig {
    pub lambda_diff: f64,
    pub lambda_ae: f64,
    pub lambda_kd: f64,
    pub total_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub initial_timestep: usize,
    pub nfe: usize,
    /// When `false`, the student latent is compared to the teacher latent
    /// directly (plain feature-mimic baseline); no diffusion model is trained.
    pub denoise: bool,
    /// Learned noise matching; when `false` the chain starts from the raw latent.
    pub adaptive_noise: bool,
    /// Let the distillation loss update denoiser parameters too.
    pub kd_updates_denoiser: bool,
}

impl Default for DiffKdConfig {
    fn default() -> Self {
        Self {
            lambda_diff: 1.0,
            lambda_ae: 1.0,
            lambda_kd: 1.0,
            total_timesteps: crate::schedule::DEFAULT_TOTAL_TIMESTEPS,
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
            initial_timestep: crate::schedule::DEFAULT_INITIAL_TIMESTEP,
            nfe: crate::schedule::DEFAULT_NFE,
            denoise: true,
            adaptive_noise: true,
            kd_updates_denoiser: false,
        }
    }
}

impl DiffKdConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_diff", self.lambda_diff),
            ("lambda_ae", self.lambda_ae),
            ("lambda_kd", self.lambda_kd),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(field, format!("{v} must be a finite value >= 0")));
            }
        }
        let schedule = self.schedule()?;
        schedule.sampling_plan(self.initial_timestep, self.nfe)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_timesteps, self.beta_start, self.beta_end)
    }

    /// `task + λ1·diff + λ2·ae + λ3·diffkd`.
    pub fn weighted_total(&self, task: f64, diff: f64, ae: f64, diffkd: f64) -> f64 {
        task + self.lambda_diff * diff + self.lambda_ae * ae + self.lambda_kd * diffkd
    }
}

/// Which model output a head distills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Final feature map before global pooling, `(N, C, H, W)`.
    Backbone,
    /// Classification logits, `(N, classes)`.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub feature_tap: FeatureTap,
    #[serde(default)]
    pub use_autoencoder: bool,
    /// Autoencoder latent width; ignored without an autoencoder.
    #[serde(default)]
    pub latent_channels: Option<usize>,
    #[serde(default = "default_distance")]
    pub distance: DistanceKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_distance() -> DistanceKind {
    DistanceKind::Mse
}

fn default_temperature() -> f64 {
    1.0
}

impl HeadConfig {
    pub fn feature_mse() -> Self {
        Self {
            feature_tap: FeatureTap::Backbone,
            use_autoencoder: false,
            latent_channels: None,
            distance: DistanceKind::Mse,
            temperature: 1.0,
        }
    }

    pub fn logits_kl() -> Self {
        Self {
            feature_tap: FeatureTap::Logits,
            use_autoencoder: false,
            latent_channels: None,
            distance: DistanceKind::Kl,
            temperature: 1.0,
        }
    }
}

/// Teacher or student outputs at the tap points heads can attach to.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub feature: Tensor,
    pub logits: Tensor,
}

impl ModelOutputs {
    pub fn tap(&self, tap: FeatureTap) -> &Tensor {
        match tap {
            FeatureTap::Backbone => &self.feature,
            FeatureTap::Logits => &self.logits,
        }
    }
}

/// One distillation head: optional autoencoder, projection, denoiser, noise adapter.
#[derive(Debug, Clone)]
pub struct DiffKdHead {
    config: HeadConfig,
    distance: Distance,
    autoencoder: Option<LinearAutoencoder>,
    projection: StudentProjection,
    denoiser: Denoiser,
    adapter: NoiseAdapter,
}

impl DiffKdHead {
    /// `teacher_channels` / `student_channels` are the channel counts at the tap.
    pub fn new(
        pb: &ParamBuilder,
        config: HeadConfig,
        teacher_channels: usize,
        student_channels: usize,
    ) -> Result<Self> {
        let distance = Distance::new(config.distance, config.temperature)?;
        let spatial = config.feature_tap == FeatureTap::Backbone;
        if config.use_autoencoder && !spatial {
            return Err(Error::Config("autoencoder is only supported on backbone feature heads".into()));
        }
        if spatial && config.distance != DistanceKind::Mse {
            return Err(Error::Config(format!(
                "distance {:?} needs (N, classes) inputs; backbone heads use mse",
                config.distance
            )));
        }
        let autoencoder = if config.use_autoencoder {
            let latent = config
                .latent_channels
                .ok_or_else(|| Error::Config("use_autoencoder requires latent_channels".into()))?;
            Some(LinearAutoencoder::new(
                &pb.pp("ae"),
                AutoencoderSpec {
                    in_channels: teacher_channels,
                    latent_channels: latent,
                },
            )?)
        } else {
            None
        };
        let latent = autoencoder
            .as_ref()
            .map(|ae| ae.spec().latent_channels)
            .unwrap_or(teacher_channels);
        let projection = StudentProjection::new(
            &pb.pp("proj"),
            ProjectionSpec {
                in_channels: student_channels,
                out_channels: latent,
            },
        )?;
        let spec = if spatial {
            DenoiserSpec::spatial(latent)
        } else {
            DenoiserSpec::vector(latent)
        };
        let denoiser = Denoiser::new(&pb.pp("denoiser"), spec)?;
        let adapter = NoiseAdapter::new(&pb.pp("adapter"), NoiseAdapterSpec { channels: latent, spatial })?;
        Ok(Self {
            config,
            distance,
            autoencoder,
            projection,
            denoiser,
            adapter,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn autoencoder(&self) -> Option<&LinearAutoencoder> {
        self.autoencoder.as_ref()
    }

    pub fn projection(&self) -> &StudentProjection {
        &self.projection
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn adapter(&self) -> &NoiseAdapter {
        &self.adapter
    }

    /// Detached teacher latent (after the autoencoder encoder, if any).
    pub fn teacher_latent(&self, teacher_feature: &Tensor) -> Result<Tensor> {
        let f = teacher_feature.detach();
        match &self.autoencoder {
            Some(ae) => ae.encode(&f),
            None => Ok(f),
        }
    }
}

/// Differentiable loss terms for one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub task: Tensor,
    pub diff: Tensor,
    pub ae: Tensor,
    pub diffkd: Tensor,
    pub total: Tensor,
}

/// Scalar snapshot of the loss terms. Non-finite values serialize as the
/// strings `"NaN"`, `"inf"` and `"-inf"` so divergence records stay readable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(with = "finite_or_text")]
    pub task: f64,
    #[serde(with = "finite_or_text")]
    pub diff: f64,
    #[serde(with = "finite_or_text")]
    pub ae: f64,
    #[serde(with = "finite_or_text")]
    pub diffkd: f64,
    #[serde(with = "finite_or_text")]
    pub total: f64,
}

mod finite_or_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("NaN"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

impl LossTerms {
    pub fn values(&self) -> Result<LossBundle> {
        let get = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBundle {
            task: get(&self.task)?,
            diff: get(&self.diff)?,
            ae: get(&self.ae)?,
            diffkd: get(&self.diffkd)?,
            total: get(&self.total)?,
        })
    }
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.task, self.diff, self.ae, self.diffkd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-head tensors kept for logging and inspection.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub teacher_latent: Tensor,
    pub projected: Tensor,
    pub denoised: Tensor,
    pub gamma: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub heads: Vec<HeadTrace>,
}

/// All distillation heads plus the shared schedule and sampling plan.
#[derive(Debug, Clone)]
pub struct DiffKd {
    config: DiffKdConfig,
    schedule: NoiseSchedule,
    plan: SamplingPlan,
    heads: Vec<DiffKdHead>,
}

impl DiffKd {
    pub fn new(config: DiffKdConfig, heads: Vec<DiffKdHead>) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let plan = schedule.sampling_plan(config.initial_timestep, config.nfe)?;
        Ok(Self {
            config,
            schedule,
            plan,
            heads,
        })
    }

    /// Builds one head per entry of `heads`, naming parameters `head{i}.*`.
    pub fn build(
        pb: &ParamBuilder,
        config: DiffKdConfig,
        heads: &[HeadConfig],
        teacher_channels: impl Fn(FeatureTap) -> usize,
        student_channels: impl Fn(FeatureTap) -> usize,
    ) -> Result<Self> {
        let built = heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                DiffKdHead::new(
                    &pb.pp(format!("head{i}")),
                    h.clone(),
                    teacher_channels(h.feature_tap),
                    student_channels(h.feature_tap),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, built)
    }

    pub fn config(&self) -> &DiffKdConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn plan(&self) -> &SamplingPlan {
        &self.plan
    }

    pub fn heads(&self) -> &[DiffKdHead] {
        &self.heads
    }

    fn chain_mode(&self) -> ParamMode {
        if self.config.kd_updates_denoiser {
            ParamMode::Tracked
        } else {
            ParamMode::Frozen
        }
    }

    /// Projects a student feature and runs noise matching plus the reverse chain.
    pub fn denoise_student(&self, head: &DiffKdHead, student_feature: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Denoised)> {
        let projected = head.projection.forward(student_feature)?;
        let predictor = ModedDenoiser {
            denoiser: &head.denoiser,
            mode: self.chain_mode(),
        };
        let matching = if self.config.adaptive_noise {
            NoiseMatching::Adaptive(&head.adapter)
        } else {
            NoiseMatching::Disabled
        };
        let denoised = denoise_latent(&self.schedule, &self.plan, &predictor, matching, &projected, rng)?;
        Ok((projected, denoised))
    }

    /// Task loss plus every head's diffusion, reconstruction and distillation terms.
    ///
    /// Terms whose weight is zero are skipped entirely: no graph is built and
    /// no randomness is consumed for them.
    pub fn compute_losses(
        &self,
        labels: &Tensor,
        teacher: &ModelOutputs,
        student: &ModelOutputs,
        rng: &mut impl Rng,
    ) -> Result<LossOutput> {
        let task = cross_entropy(&student.logits, labels)?;
        let zero = task.zeros_like()?;
        let (mut diff, mut ae, mut kd) = (zero.clone(), zero.clone(), zero.clone());
        let mut traces = Vec::with_capacity(self.heads.len());
        let cfg = &self.config;
        let distill = cfg.lambda_kd > 0.0;
        for head in &self.heads {
            let tap = head.config.feature_tap;
            let teacher_feature = teacher.tap(tap).detach();
            let student_feature = student.tap(tap);
            if teacher_feature.rank() != student_feature.rank() {
                return Err(Error::Config(format!(
                    "{tap:?} head: teacher rank {} vs student rank {}",
                    teacher_feature.rank(),
                    student_feature.rank()
                )));
            }
            let teacher_latent = head.teacher_latent(&teacher_feature)?;
            if let (Some(autoencoder), true) = (&head.autoencoder, cfg.lambda_ae > 0.0) {
                ae = (ae + autoencoder.reconstruction_loss(&teacher_feature)?)?;
            }
            if cfg.denoise && cfg.lambda_diff > 0.0 {
                let predictor = ModedDenoiser {
                    denoiser: &head.denoiser,
                    mode: ParamMode::Tracked,
                };
                diff = (diff + diffusion_loss(&self.schedule, &predictor, &teacher_latent, rng)?)?;
            }
            if distill {
                let (projected, denoised) = if cfg.denoise {
                    self.denoise_student(head, student_feature, rng)?
                } else {
                    let p = head.projection.forward(student_feature)?;
                    (p.clone(), Denoised { latent: p, gamma: None })
                };
                if denoised.latent.dims() != teacher_latent.dims() {
                    return Err(Error::shape(
                        "denoised student vs teacher latent",
                        format!("{:?} vs {:?}", denoised.latent.dims(), teacher_latent.dims()),
                    ));
                }
                kd = (kd + diffkd_loss(&denoised.latent, &teacher_latent, &head.distance)?)?;
                traces.push(HeadTrace {
                    teacher_latent,
                    projected,
                    denoised: denoised.latent,
                    gamma: denoised.gamma,
                });
            }
        }
        let mut total = task.clone();
        for (lambda, term) in [(cfg.lambda_diff, &diff), (cfg.lambda_ae, &ae), (cfg.lambda_kd, &kd)] {
            if lambda > 0.0 {
                total = (total + (term * lambda)?)?;
            }
        }
        Ok(LossOutput {
            terms: LossTerms {
                task,
                diff,
                ae,
                diffkd: kd,
                total,
            },
            heads: traces,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(Tensor);

    impl NoisePredictor for Constant {
        fn predict(&self, z_t: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok(self.0.broadcast_as(z_t.shape())?.contiguous()?)
        }
    }

    #[test]
    fn non_finite_losses_round_trip() {
        let b = LossBundle { task: f64::NAN, diff: f64::INFINITY, ae: f64::NEG_INFINITY, diffkd: 0.5, total: f64::NAN };
        let json = serde_json::to_string(&b).unwrap();
        let back: LossBundle = serde_json::from_str(&json).unwrap();
        assert!(back.task.is_nan() && back.total.is_nan());
        assert_eq!((back.diff, back.ae, back.diffkd), (f64::INFINITY, f64::NEG_INFINITY, 0.5));
    }

    #[test]
    fn weighted_total_arithmetic() {
        let cfg = DiffKdConfig::default();
        assert_eq!(cfg.weighted_total(1.0, 2.0, 3.0, 4.0), 10.0);
        let off = DiffKdConfig { lambda_kd: 0.0, ..cfg };
        assert_eq!(off.weighted_total(1.0, 2.0, 3.0, 4.0), 6.0);
    }

    #[test]
    fn default_lambdas_are_one() {
        let cfg = DiffKdConfig::default();
        assert_eq!((cfg.lambda_diff, cfg.lambda_ae, cfg.lambda_kd), (1.0, 1.0, 1.0));
        assert_eq!((cfg.initial_timestep, cfg.nfe, cfg.total_timesteps), (500, 5, 1000));
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = DiffKdConfig {
            lambda_ae: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_predictor_chain_inverts_assumed_noising() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z = Tensor::randn(0f64, 1.0, (2, 3), &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f64, 1.0, (1, 3), &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for nfe in [1, 2, 5] {
            let plan = schedule.sampling_plan(500, nfe).unwrap();
            let out = denoise_latent(&schedule, &plan, &Constant(eps.clone()), NoiseMatching::Fixed(1.0), &z, &mut rng)
                .unwrap();
            let ab = schedule.alpha_bar(500).unwrap();
            let expected = ((&z - (eps.broadcast_as((2, 3)).unwrap() * (1.0 - ab).sqrt()).unwrap()).unwrap()
                / ab.sqrt())
            .unwrap();
            let err = (out.latent - expected).unwrap().abs().unwrap().max_all().unwrap();
            assert!(err.to_scalar::<f64>().unwrap() < 1e-12, "nfe={nfe}");
        }
    }

    #[test]
    fn head_rejects_bad_configs() {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, DType::F64, &Device::Cpu, 0);
        let mut cfg = HeadConfig::logits_kl();
        cfg.use_autoencoder = true;
        assert!(DiffKdHead::new(&pb.pp("a"), cfg, 10, 10).is_err());
        let mut cfg = HeadConfig::feature_mse();
        cfg.use_autoencoder = true;
        assert!(DiffKdHead::new(&pb.pp("b"), cfg, 8, 8).is_err());
        let mut cfg = HeadConfig::feature_mse();
        cfg.distance = DistanceKind::Kl;
        assert!(DiffKdHead::new(&pb.pp("c"), cfg, 8, 8).is_err());
    }
}
