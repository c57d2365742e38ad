//! Saliency maps `H·W·softmax(channel mean / τ)` rendered to PNG + CSV.
//!
//! Without arguments a synthetic feature is used; pass a student checkpoint
//! to render teacher / student / denoised maps for a few evaluation images.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use diffkd::train::Session;
use diffkd::viz::{self, attention_map, VisualInput, DEFAULT_ATTENTION_TAU};

fn main() -> diffkd::Result<()> {
    let out = PathBuf::from("out/attention");
    if let Some(ckpt) = std::env::args().nth(1) {
        let (session, _) = Session::from_checkpoint(&PathBuf::from(ckpt))?;
        let images = viz::input_images(&session, &VisualInput::Batch(4))?;
        let maps = viz::visualize(&session, &images, DEFAULT_ATTENTION_TAU, &out, 0)?;
        println!("wrote maps for {} samples to {}", maps.len(), out.display());
        return Ok(());
    }

    // A blob centred at (5, 9) on a 12×16 grid, repeated over 8 channels.
    let (h, w) = (12usize, 16usize);
    let blob: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            (-((y - 5.0).powi(2) + (x - 9.0).powi(2)) / 8.0).exp()
        })
        .collect();
    let feature = Tensor::from_vec(blob.repeat(8), (8, h, w), &Device::Cpu)?;
    for tau in [2.0, DEFAULT_ATTENTION_TAU, 0.1] {
        let map = attention_map(&feature, tau)?;
        let peak = map.values.iter().cloned().fold(0.0, f64::max);
        println!("tau {tau:<4} sum {:.3} (= H·W {}), peak {peak:.3}", map.sum(), h * w);
        map.write_csv(&out.join(format!("blob_tau{tau}.csv")))?;
        map.render(16)
            .save(out.join(format!("blob_tau{tau}.png")))
            .expect("writable output directory");
    }
    Ok(())
}
