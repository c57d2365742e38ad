//! Training the lightweight denoiser on fixed "teacher" latents.
//!
//! The diffusion loss starts near 1 (a zero-initialized network predicts no
//! noise) and falls as the network learns the latent distribution.

use candle_core::{DType, Device};
use diffkd::config::OptimizerConfig;
use diffkd::denoiser::{Denoiser, DenoiserSpec};
use diffkd::diffkd::{diffusion_loss, ModedDenoiser};
use diffkd::nn::{ParamBuilder, ParamMode, ParamStore};
use diffkd::optim::Sgd;
use diffkd::random::randn;
use diffkd::schedule::NoiseSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diffkd::Result<()> {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::new();
    let denoiser = Denoiser::new(
        &ParamBuilder::new(&store, DType::F32, &device, 0),
        DenoiserSpec::spatial(16),
    )?;
    println!("denoiser parameters: {}", store.parameter_count());

    // Structured latents: a per-channel offset plus small noise.
    let offsets = randn((1, 16, 1, 1), DType::F32, &device, &mut rng)?;
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let predictor = ModedDenoiser { denoiser: &denoiser, mode: ParamMode::Tracked };
    let mut opt = Sgd::new(
        store.trainable(),
        &OptimizerConfig { lr: 0.05, momentum: 0.9, weight_decay: 0.0, ..Default::default() },
    )?;
    for step in 0..=200 {
        let noise = (randn((32, 16, 4, 4), DType::F32, &device, &mut rng)? * 0.1)?;
        let latents = noise.broadcast_add(&offsets)?;
        let loss = diffusion_loss(&schedule, &predictor, &latents, &mut rng)?;
        if step % 40 == 0 {
            println!("step {step:>3}  diffusion loss {:.4}", loss.to_scalar::<f32>()?);
        }
        opt.step(&loss.backward()?, 0.05)?;
    }
    println!("denoiser evaluations: {}", denoiser.evaluations());
    Ok(())
}
