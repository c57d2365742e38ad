//! Linear autoencoder, student projection and adaptive noise matching.

use candle_core::{DType, Device, Tensor};
use diffkd::adapters::{
    fuse_with_noise, AutoencoderSpec, LinearAutoencoder, NoiseAdapter, NoiseAdapterSpec, ProjectionSpec,
    StudentProjection,
};
use diffkd::nn::{ParamBuilder, ParamStore};
use diffkd::random::{randn, randn_like};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> diffkd::Result<()> {
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new();
    let pb = ParamBuilder::new(&store, DType::F64, &device, 11);

    // Teacher: 64 channels compressed to a 16-channel latent.
    let ae = LinearAutoencoder::new(&pb.pp("ae"), AutoencoderSpec { in_channels: 64, latent_channels: 16 })?;
    let teacher_feature = randn((4, 64, 4, 4), DType::F64, &device, &mut rng)?;
    let latent = ae.encode(&teacher_feature)?;
    println!("teacher {:?} -> latent {:?}", teacher_feature.dims(), latent.dims());
    println!("reconstruction loss {:.4}", ae.reconstruction_loss(&teacher_feature)?.to_scalar::<f64>()?);

    // Student: 32 channels projected into the same latent space.
    let proj = StudentProjection::new(&pb.pp("proj"), ProjectionSpec { in_channels: 32, out_channels: 16 })?;
    let student = proj.forward(&randn((4, 32, 4, 4), DType::F64, &device, &mut rng)?)?;

    // γ is predicted per sample and always lies strictly inside (0, 1).
    let adapter = NoiseAdapter::new(&pb.pp("adapter"), NoiseAdapterSpec { channels: 16, spatial: true })?;
    let eps = randn_like(&student, &mut rng)?;
    let (fused, gamma) = adapter.match_noise(&student, &eps)?;
    println!("gamma per sample {:?}", gamma.to_vec1::<f64>()?);
    println!("fused latent {:?}", fused.dims());

    // The endpoints of the fusion are exact.
    let ones = Tensor::ones(4, DType::F64, &device)?;
    let zeros = Tensor::zeros(4, DType::F64, &device)?;
    let same = fuse_with_noise(&student, &eps, &ones)?.eq(&student)?.min_all()?.to_scalar::<u8>()?;
    let noise = fuse_with_noise(&student, &eps, &zeros)?.eq(&eps)?.min_all()?.to_scalar::<u8>()?;
    println!("gamma=1 keeps the latent: {}, gamma=0 gives pure noise: {}", same == 1, noise == 1);
    Ok(())
}
