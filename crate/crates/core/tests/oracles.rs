//! Closed-form oracles for the schedule, sampler, adapters, distances and
//! attention maps. Expected values are computed here, independently of the
//! library code under test.

use approx::assert_relative_eq;
use candle_core::{DType, Device, Tensor};
use diffkd::adapters::{fuse_with_noise, NoiseAdapter, NoiseAdapterSpec};
use diffkd::denoiser::{timestep_embedding, Denoiser, DenoiserSpec};
use diffkd::diffkd::{denoise_latent, diffusion_loss, ModedDenoiser, NoiseMatching, NoisePredictor};
use diffkd::distance::{
    dist_correlation_distance, inter_class_term, kl_divergence_distance, mse_distance, Distance, DistanceKind,
};
use diffkd::nn::{ParamBuilder, ParamMode, ParamStore};
use diffkd::random::randn;
use diffkd::schedule::{NoiseSchedule, SamplingPlan};
use diffkd::viz::attention_map;
use diffkd::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CPU: Device = Device::Cpu;

fn linear_betas(t: usize, start: f64, end: f64) -> Vec<f64> {
    (0..t).map(|i| start + (end - start) * i as f64 / (t - 1) as f64).collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = scalar(&(a - b).unwrap().sqr().unwrap().sum_all().unwrap()).sqrt();
    let norm = scalar(&b.sqr().unwrap().sum_all().unwrap()).sqrt();
    diff / norm.max(1e-300)
}

#[test]
fn alpha_bar_matches_direct_product() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut prod = 1.0;
    for (t, beta) in linear_betas(1000, 1e-4, 0.02).into_iter().enumerate() {
        prod *= 1.0 - beta;
        assert_relative_eq!(s.alpha_bar(t).unwrap(), prod, max_relative = 1e-12);
    }
    // ≈ 4.0e-5 at the end of the horizon
    assert!((s.alpha_bar(999).unwrap() - 4.0e-5).abs() < 0.1e-5);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn tiny_schedules() {
    let s = NoiseSchedule::from_betas(vec![0.1]).unwrap();
    assert_relative_eq!(s.alpha_bar(0).unwrap(), 0.9, epsilon = 1e-15);
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    assert_relative_eq!(s.alpha_bar(1).unwrap(), 0.72, epsilon = 1e-15);
    assert!(matches!(s.alpha_bar(2), Err(Error::Index { .. })));
}

#[test]
fn add_noise_scalar_oracle() {
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    let one = Tensor::new(&[1.0f64], &CPU).unwrap();
    let z = s.add_noise(&one, 1, &one).unwrap().to_vec1::<f64>().unwrap()[0];
    let expected = 0.72f64.sqrt() + 0.28f64.sqrt();
    assert_relative_eq!(z, expected, epsilon = 1e-12);
    assert!((z - 1.3777).abs() < 1e-4);
}

#[test]
fn add_noise_rejects_bad_inputs() {
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let a = Tensor::zeros(3, DType::F64, &CPU).unwrap();
    let b = Tensor::zeros(4, DType::F64, &CPU).unwrap();
    assert!(matches!(s.add_noise(&a, 10, &a), Err(Error::Index { .. })));
    assert!(matches!(s.add_noise(&a, 1, &b), Err(Error::Shape { .. })));
}

#[test]
fn sampling_plans() {
    let p = SamplingPlan::new(1000, 500, 5).unwrap();
    assert_eq!(p.timesteps, vec![500, 400, 300, 200, 100]);
    assert_eq!(p.interval, 100);
    assert_eq!(p.steps().collect::<Vec<_>>(), vec![(500, 400), (400, 300), (300, 200), (200, 100), (100, 0)]);
    assert_eq!(SamplingPlan::new(1000, 500, 1).unwrap().timesteps, vec![500]);
    let p = SamplingPlan::new(1000, 6, 3).unwrap();
    assert_eq!((p.timesteps.clone(), p.interval), (vec![6, 4, 2], 2));
    assert!(matches!(SamplingPlan::new(1000, 5, 6), Err(Error::Parameter { .. })));
}

#[test]
fn inversion_with_exact_noise() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = rng.random_range(1..1000);
        let z0 = randn((3, 5), DType::F64, &CPU, &mut rng).unwrap();
        let eps = randn((3, 5), DType::F64, &CPU, &mut rng).unwrap();
        let zt = s.add_noise(&z0, t, &eps).unwrap();
        let x0 = s.ddim_step(&zt, &eps, t, 0).unwrap();
        assert!(rel_err(&x0, &z0) <= 1e-6, "t={t}");
    }
}

#[test]
fn five_step_oracle_chain_recovers_z0() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let plan = s.sampling_plan(500, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = randn((4, 3, 2, 2), DType::F64, &CPU, &mut rng).unwrap();
    let eps = randn((4, 3, 2, 2), DType::F64, &CPU, &mut rng).unwrap();
    let mut z = s.add_noise(&z0, 500, &eps).unwrap();
    for (t, t_next) in plan.steps() {
        z = s.ddim_step(&z, &eps, t, t_next).unwrap();
    }
    assert!(rel_err(&z, &z0) <= 1e-5);
}

#[test]
fn timestep_embedding_values() {
    let e0 = timestep_embedding(0, 128).unwrap();
    assert!(e0[..64].iter().all(|&v| v == 0.0));
    assert!(e0[64..].iter().all(|&v| v == 1.0));
    assert_eq!(timestep_embedding(77, 128).unwrap(), timestep_embedding(77, 128).unwrap());
    let e = timestep_embedding(500, 128).unwrap();
    for i in 0..64 {
        let freq = (-(10000f64.ln()) * i as f64 / 64.0).exp();
        assert_relative_eq!(e[i], (500.0 * freq).sin(), epsilon = 1e-12);
        assert_relative_eq!(e[64 + i], (500.0 * freq).cos(), epsilon = 1e-12);
    }
    assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn denoiser_shapes_and_timestep_sensitivity() {
    let store = ParamStore::new();
    let pb = ParamBuilder::new(&store, DType::F32, &CPU, 0);
    let spec = DenoiserSpec { zero_init_output: false, ..DenoiserSpec::spatial(64) };
    let d = Denoiser::new(&pb.pp("s"), spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = randn((2, 64, 8, 8), DType::F32, &CPU, &mut rng).unwrap();
    let out0 = d.predict_noise(&z, 0, ParamMode::Tracked).unwrap();
    assert_eq!(out0.dims(), &[2, 64, 8, 8]);
    let out1 = d.predict_noise(&z, 999, ParamMode::Tracked).unwrap();
    assert!(scalar(&(out0 - out1).unwrap().abs().unwrap().max_all().unwrap()) > 0.0);

    let v = Denoiser::new(&pb.pp("v"), DenoiserSpec::vector(100)).unwrap();
    let x = randn((4, 100), DType::F32, &CPU, &mut rng).unwrap();
    assert_eq!(v.predict_noise(&x, 3, ParamMode::Tracked).unwrap().dims(), &[4, 100]);
    assert!(matches!(
        v.predict_noise(&z, 3, ParamMode::Tracked),
        Err(Error::Shape { .. })
    ));
}

struct Oracle(Tensor);

impl NoisePredictor for Oracle {
    fn predict(&self, _z: &Tensor, _t: &[usize]) -> diffkd::Result<Tensor> {
        Ok(self.0.clone())
    }
}

#[test]
fn diffusion_loss_oracles() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let store = ParamStore::new();
    let d = Denoiser::new(&ParamBuilder::new(&store, DType::F64, &CPU, 0), DenoiserSpec::spatial(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = randn((16, 8, 6, 6), DType::F64, &CPU, &mut rng).unwrap();
    assert!(z0.elem_count() >= 4096);

    // zero-initialized output layer predicts 0, so the loss is E‖ε‖² per element
    let mut rng_loss = ChaCha8Rng::seed_from_u64(9);
    let loss = scalar(&diffusion_loss(&s, &ModedDenoiser { denoiser: &d, mode: ParamMode::Tracked }, &z0, &mut rng_loss).unwrap());
    // independent oracle: replay the same draws and average ε²
    let mut replay = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..16 {
        let _: usize = replay.random_range(0..1000);
    }
    let eps = randn((16, 8, 6, 6), DType::F64, &CPU, &mut replay).unwrap();
    let oracle = scalar(&eps.sqr().unwrap().mean_all().unwrap());
    assert_relative_eq!(loss, oracle, max_relative = 1e-12);
    assert!((loss - 1.0).abs() <= 0.05, "{loss}");

    // a predictor returning exactly ε gives zero loss
    let mut replay = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..16 {
        let _: usize = replay.random_range(0..1000);
    }
    let eps = randn((16, 8, 6, 6), DType::F64, &CPU, &mut replay).unwrap();
    let loss = scalar(&diffusion_loss(&s, &Oracle(eps), &z0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
    assert_eq!(loss, 0.0);
}

#[test]
fn denoise_latent_counts_and_inverts() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let store = ParamStore::new();
    let d = Denoiser::new(&ParamBuilder::new(&store, DType::F64, &CPU, 0), DenoiserSpec::spatial(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = randn((2, 8, 3, 3), DType::F64, &CPU, &mut rng).unwrap();
    for nfe in [1, 2, 5, 10] {
        d.reset_evaluations();
        let plan = s.sampling_plan(500, nfe).unwrap();
        let out = denoise_latent(
            &s,
            &plan,
            &ModedDenoiser { denoiser: &d, mode: ParamMode::Frozen },
            NoiseMatching::Disabled,
            &student,
            &mut rng,
        )
        .unwrap();
        assert_eq!(d.evaluations(), nfe);
        assert_eq!(out.latent.dims(), student.dims());
    }

    // γ = 1 with an oracle predictor: the chain undoes exactly the noising it
    // assumes, so z_500 = sqrt(ᾱ)·x + sqrt(1-ᾱ)·ε maps back to x.
    let x = randn((2, 8, 3, 3), DType::F64, &CPU, &mut rng).unwrap();
    let eps = randn((2, 8, 3, 3), DType::F64, &CPU, &mut rng).unwrap();
    let z500 = s.add_noise(&x, 500, &eps).unwrap();
    let plan = s.sampling_plan(500, 5).unwrap();
    let out = denoise_latent(&s, &plan, &Oracle(eps.clone()), NoiseMatching::Fixed(1.0), &z500, &mut rng).unwrap();
    assert!(rel_err(&out.latent, &x) <= 1e-5);

    // nfe = 1 is a single x̂0 estimate
    let plan = s.sampling_plan(500, 1).unwrap();
    let one = denoise_latent(&s, &plan, &Oracle(eps.clone()), NoiseMatching::Disabled, &z500, &mut rng).unwrap();
    let ab = s.alpha_bar(500).unwrap();
    let manual = ((&z500 - (&eps * (1.0 - ab).sqrt()).unwrap()).unwrap() / ab.sqrt()).unwrap();
    assert!(rel_err(&one.latent, &manual) <= 1e-12);
}

#[test]
fn gamma_range_over_many_inputs() {
    let store = ParamStore::new();
    let pb = ParamBuilder::new(&store, DType::F64, &CPU, 4);
    let spatial = NoiseAdapter::new(&pb.pp("s"), NoiseAdapterSpec { channels: 4, spatial: true }).unwrap();
    let vector = NoiseAdapter::new(&pb.pp("v"), NoiseAdapterSpec { channels: 6, spatial: false }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut all = Vec::new();
    for scale in [1.0, 10.0, 1e3] {
        let x = (randn((2000, 4, 2, 2), DType::F64, &CPU, &mut rng).unwrap() * scale).unwrap();
        all.extend(spatial.gamma(&x).unwrap().to_vec1::<f64>().unwrap());
        let v = (randn((1500, 6), DType::F64, &CPU, &mut rng).unwrap() * scale).unwrap();
        all.extend(vector.gamma(&v).unwrap().to_vec1::<f64>().unwrap());
    }
    assert!(all.len() >= 10_000);
    assert!(all.iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn fusion_endpoints_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = randn((3, 2, 2, 2), DType::F64, &CPU, &mut rng).unwrap();
    let eps = randn((3, 2, 2, 2), DType::F64, &CPU, &mut rng).unwrap();
    let ones = Tensor::ones(3, DType::F64, &CPU).unwrap();
    let zeros = Tensor::zeros(3, DType::F64, &CPU).unwrap();
    let same = fuse_with_noise(&z, &eps, &ones).unwrap();
    assert_eq!(same.flatten_all().unwrap().to_vec1::<f64>().unwrap(), z.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    let noise = fuse_with_noise(&z, &eps, &zeros).unwrap();
    assert_eq!(noise.flatten_all().unwrap().to_vec1::<f64>().unwrap(), eps.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    let mid = fuse_with_noise(
        &Tensor::new(&[[2.0f64]], &CPU).unwrap(),
        &Tensor::new(&[[0.0f64]], &CPU).unwrap(),
        &Tensor::new(&[0.5f64], &CPU).unwrap(),
    )
    .unwrap();
    assert_eq!(mid.to_vec2::<f64>().unwrap(), vec![vec![1.0]]);
}

#[test]
fn distance_examples() {
    let t = |v: &[f64]| Tensor::new(v, &CPU).unwrap();
    let m = |rows: Vec<Vec<f64>>| Tensor::new(rows, &CPU).unwrap();
    assert_eq!(scalar(&mse_distance(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap()), 0.0);
    assert!((scalar(&mse_distance(&t(&[1.0; 4]), &t(&[0.0; 4])).unwrap()) - 1.0).abs() < 1e-6);
    assert!((scalar(&mse_distance(&t(&[1.0, 3.0]), &t(&[2.0, 1.0])).unwrap()) - 2.5).abs() < 1e-6);

    // KL(p ‖ uniform) with p = softmax([0, ln 3]) = [0.25, 0.75]
    let teacher = m(vec![vec![0.0, 3f64.ln()]]);
    let student = m(vec![vec![0.0, 0.0]]);
    let oracle = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    let kl = scalar(&kl_divergence_distance(&student, &teacher, 1.0).unwrap());
    assert!((kl - oracle).abs() < 1e-6);
    assert!((kl - 0.1308).abs() < 1e-4);
    for tau in [0.5, 1.0, 4.0] {
        assert!(scalar(&kl_divergence_distance(&teacher, &teacher, tau).unwrap()).abs() < 1e-9);
    }
    let a = m(vec![vec![1.0, -0.5, 2.0]]);
    let b = m(vec![vec![0.2, 0.9, -1.0]]);
    let ab = scalar(&kl_divergence_distance(&a, &b, 1.0).unwrap());
    let ba = scalar(&kl_divergence_distance(&b, &a, 1.0).unwrap());
    assert!(ab >= 0.0 && ba >= 0.0 && (ab - ba).abs() > 1e-6);
    assert!(matches!(kl_divergence_distance(&a, &b, 0.0), Err(Error::Parameter { .. })));

    let teacher = m(vec![vec![1.0, 2.0, 3.0]]);
    let anti = m(vec![vec![3.0, 2.0, 1.0]]);
    assert!((scalar(&inter_class_term(&anti, &teacher).unwrap()) - 2.0).abs() < 1e-6);
    let x = m(vec![vec![0.3, -1.2, 2.5, 0.0], vec![1.0, 0.5, -0.5, 2.0], vec![-2.0, 0.1, 0.4, 0.9]]);
    assert!(scalar(&dist_correlation_distance(&x, &x).unwrap()).abs() < 1e-6);
    let affine = ((&x * 2.0).unwrap() + 1.0).unwrap();
    assert!(scalar(&dist_correlation_distance(&affine, &x).unwrap()).abs() < 1e-9);

    assert!(matches!("cosine".parse::<DistanceKind>(), Err(Error::Config(_))));
    assert_eq!(scalar(&Distance::mse().compute(&x, &x).unwrap()), 0.0);
}

#[test]
fn inter_class_term_is_invariant_to_per_row_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = randn((5, 7), DType::F64, &CPU, &mut rng).unwrap();
    let t = randn((5, 7), DType::F64, &CPU, &mut rng).unwrap();
    let scale = Tensor::new(&[[0.5f64], [2.0], [3.0], [0.1], [7.0]], &CPU).unwrap();
    let shift = Tensor::new(&[[1.0f64], [-4.0], [0.0], [2.5], [-0.3]], &CPU).unwrap();
    let moved = s.broadcast_mul(&scale).unwrap().broadcast_add(&shift).unwrap();
    let a = scalar(&inter_class_term(&s, &t).unwrap());
    let b = scalar(&inter_class_term(&moved, &t).unwrap());
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn attention_map_contract() {
    let f = Tensor::full(3.25f64, (5, 4, 6), &CPU).unwrap();
    let m = attention_map(&f, 0.5).unwrap();
    assert!(m.values.iter().all(|&v| v == 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, h, w) in [(1, 1, 1), (3, 4, 5), (16, 7, 7), (2, 1, 9)] {
        let x = randn((c, h, w), DType::F64, &CPU, &mut rng).unwrap();
        let m = attention_map(&x, 0.5).unwrap();
        assert_relative_eq!(m.sum(), (h * w) as f64, max_relative = 1e-6);
        assert!(m.values.iter().all(|&v| v >= 0.0));
    }

    // τ → 0 concentrates all mass on the argmax pixel
    let x = randn((4, 3, 3), DType::F64, &CPU, &mut rng).unwrap();
    let mean = x.mean(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let argmax = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    let m = attention_map(&x, 1e-3).unwrap();
    for (i, v) in m.values.iter().enumerate() {
        let target = if i == argmax { 9.0 } else { 0.0 };
        assert!((v - target).abs() < 1e-3, "{i}: {v}");
    }
    assert!(matches!(attention_map(&x, 0.0), Err(Error::Parameter { .. })));
}
