//! Seeded Gaussian tensors.
//!
//! candle's own `randn` draws from a thread-local generator; everything here
//! goes through an explicit ChaCha stream so runs are reproducible.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub type TrainRng = ChaCha8Rng;

pub fn randn<S: Into<Shape>>(
    shape: S,
    dtype: DType,
    device: &Device,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub fn randn_like(t: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    randn(t.shape().clone(), t.dtype(), t.device(), rng)
}
