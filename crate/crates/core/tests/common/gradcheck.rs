//! Central-difference gradient checking, in f64.
//!
//! The relative error is measured over the whole sampled gradient vector:
//! ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).

use candle_core::{DType, Device, Tensor, Var};
use diffkd::diffkd::{DiffKd, DiffKdConfig, FeatureTap, HeadConfig, ModelOutputs};
use diffkd::distance::DistanceKind;
use diffkd::nn::{ParamBuilder, ParamStore};
use diffkd::random::randn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CPU: Device = Device::Cpu;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Elements sampled per parameter tensor.
pub const SAMPLES: usize = 12;

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn set_element(var: &Var, index: usize, value: f64) {
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.shape(), &CPU).unwrap()).unwrap();
}

fn get_element(t: &Tensor, index: usize) -> f64 {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index]
}

/// Relative error between analytic and central-difference gradients of
/// `loss()`, over sampled elements of each var.
pub fn relative_error(name: &str, vars: &[(String, Var)], loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (_, var) in vars {
        let n = var.elem_count();
        let indices: Vec<usize> = if n <= SAMPLES {
            (0..n).collect()
        } else {
            (0..SAMPLES).map(|_| pick.random_range(0..n)).collect()
        };
        let grad = grads.get(var.as_tensor());
        for i in indices {
            let a = grad.map(|g| get_element(g, i)).unwrap_or(0.0);
            let x = get_element(var.as_tensor(), i);
            set_element(var, i, x + STEP);
            let up = scalar(&loss());
            set_element(var, i, x - STEP);
            let down = scalar(&loss());
            set_element(var, i, x);
            analytic.push(a);
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    assert!(scale > 1e-8, "{name}: gradient vanished");
    norm(&diff) / scale
}

pub fn check(name: &str, vars: &[(String, Var)], loss: impl Fn() -> Tensor) {
    let rel = relative_error(name, vars, loss);
    assert!(rel <= TOLERANCE, "{name}: relative error {rel:.3e}");
}

pub struct Composite {
    pub store: ParamStore,
    pub kd: DiffKd,
    pub teacher: ModelOutputs,
    pub student_feature: Var,
    pub student_logits: Var,
    pub labels: Tensor,
}

impl Composite {
    /// N=2, C=4, 2×2 spatial features plus a logits head.
    pub fn new(config: DiffKdConfig, autoencoder: bool) -> Self {
        let (n, c, classes) = (2, 4, 3);
        let heads = [
            HeadConfig {
                feature_tap: FeatureTap::Backbone,
                use_autoencoder: autoencoder,
                latent_channels: autoencoder.then_some(3),
                distance: DistanceKind::Mse,
                temperature: 1.0,
            },
            HeadConfig { temperature: 2.0, ..HeadConfig::logits_kl() },
        ];
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, DType::F64, &CPU, 3);
        let kd = DiffKd::build(&pb, config, &heads, |t| if t == FeatureTap::Backbone { c } else { classes }, |t| {
            if t == FeatureTap::Backbone {
                c
            } else {
                classes
            }
        })
        .unwrap();
        // Give the zero-initialized output layers a nonzero value so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (name, var) in store.trainable() {
            if name.contains(".denoiser.") && (name.contains(".out.") || name.contains(".fc2.")) {
                var.set(&(randn(var.shape(), DType::F64, &CPU, &mut rng).unwrap() * 0.1).unwrap()).unwrap();
            }
        }
        let teacher = ModelOutputs {
            feature: randn((n, c, 2, 2), DType::F64, &CPU, &mut rng).unwrap(),
            logits: randn((n, classes), DType::F64, &CPU, &mut rng).unwrap(),
        };
        Self {
            store,
            kd,
            teacher,
            student_feature: Var::from_tensor(&randn((n, c, 2, 2), DType::F64, &CPU, &mut rng).unwrap()).unwrap(),
            student_logits: Var::from_tensor(&randn((n, classes), DType::F64, &CPU, &mut rng).unwrap()).unwrap(),
            labels: Tensor::new(&[0u32, 2], &CPU).unwrap(),
        }
    }

    pub fn total(&self) -> Tensor {
        let student = ModelOutputs {
            feature: self.student_feature.as_tensor().clone(),
            logits: self.student_logits.as_tensor().clone(),
        };
        // identical randomness for every evaluation
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        self.kd
            .compute_losses(&self.labels, &self.teacher, &student, &mut rng)
            .unwrap()
            .terms
            .total
    }

    pub fn params(&self, part: &str) -> Vec<(String, Var)> {
        self.store
            .trainable()
            .into_iter()
            .filter(|(n, _)| n.split('.').nth(1) == Some(part))
            .collect()
    }
}

