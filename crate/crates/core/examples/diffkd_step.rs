//! One distillation step on random tensors: both head types, every loss term,
//! and where gradient flows.

use candle_core::{DType, Device, Tensor};
use diffkd::diffkd::{DiffKd, DiffKdConfig, FeatureTap, HeadConfig, ModelOutputs};
use diffkd::distance::DistanceKind;
use diffkd::nn::{ParamBuilder, ParamStore};
use diffkd::random::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diffkd::Result<()> {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, classes) = (8, 10);

    let heads = [
        HeadConfig {
            feature_tap: FeatureTap::Backbone,
            use_autoencoder: true,
            latent_channels: Some(16),
            distance: DistanceKind::Mse,
            temperature: 1.0,
        },
        HeadConfig::logits_kl(),
    ];
    let store = ParamStore::new();
    let kd = DiffKd::build(
        &ParamBuilder::new(&store, DType::F32, &device, 1),
        DiffKdConfig::default(),
        &heads,
        |tap| if tap == FeatureTap::Backbone { 64 } else { classes },
        |tap| if tap == FeatureTap::Backbone { 32 } else { classes },
    )?;
    println!("sampling plan {:?}", kd.plan().timesteps);

    // Stand-ins for network outputs; the student side is a leaf we can probe.
    let teacher = ModelOutputs {
        feature: randn((n, 64, 4, 4), DType::F32, &device, &mut rng)?.relu()?,
        logits: randn((n, classes), DType::F32, &device, &mut rng)?,
    };
    let student_feature = candle_core::Var::from_tensor(&randn((n, 32, 4, 4), DType::F32, &device, &mut rng)?)?;
    let student_logits = candle_core::Var::from_tensor(&randn((n, classes), DType::F32, &device, &mut rng)?)?;
    let student = ModelOutputs {
        feature: student_feature.as_tensor().clone(),
        logits: student_logits.as_tensor().clone(),
    };
    let labels = Tensor::from_vec((0..n as u32).map(|i| i % classes as u32).collect(), n, &device)?;

    let out = kd.compute_losses(&labels, &teacher, &student, &mut rng)?;
    let v = out.terms.values()?;
    println!(
        "task {:.4}  diff {:.4}  ae {:.4}  kd {:.4}  total {:.4}",
        v.task, v.diff, v.ae, v.diffkd, v.total
    );
    for (i, h) in out.heads.iter().enumerate() {
        let gamma = h.gamma.as_ref().map(|g| g.mean_all().and_then(|m| m.to_scalar::<f32>())).transpose()?;
        println!("head {i}: latent {:?}, mean gamma {gamma:?}", h.denoised.dims());
    }

    let grads = out.terms.total.backward()?;
    println!("student feature receives gradient: {}", grads.get(student_feature.as_tensor()).is_some());
    let with_grad = store.trainable().iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();
    println!("head parameters with gradient: {with_grad} of {}", store.trainable().len());
    Ok(())
}
