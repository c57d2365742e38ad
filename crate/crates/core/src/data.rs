//! Datasets: CIFAR binary archives and a synthetic Gaussian-mixture image set.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Prototype patterns per class.
    pub modes_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Scale of the class prototype in each sample.
    pub signal: f64,
    /// Scale of the class-independent distractor pattern.
    pub distractor: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Seed for prototypes and samples; independent of the training seed.
    pub data_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            modes_per_class: 3,
            channels: 3,
            image_size: 16,
            train_samples: 2000,
            eval_samples: 1000,
            signal: 1.0,
            distractor: 1.0,
            noise: 1.0,
            data_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the extracted CIFAR binary archive.
    pub path: Option<PathBuf>,
    /// Class-balanced subset of the training split.
    pub subset_size: Option<usize>,
    /// Class-balanced subset of the evaluation split.
    pub eval_subset_size: Option<usize>,
    /// Random crop (zero padding) plus horizontal flip on training batches.
    pub augment: bool,
    pub crop_padding: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            subset_size: None,
            eval_subset_size: None,
            augment: true,
            crop_padding: 2,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Images in `(N, C, H, W)` row-major order plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

/// One mini-batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
        }
    }

    /// Exactly `size` samples, as evenly spread over classes as possible.
    /// Which samples are kept depends only on `seed`.
    pub fn balanced_subset(&self, size: usize, seed: u64) -> Result<Self> {
        if size > self.len() {
            return Err(Error::param("subset_size", format!("{size} exceeds dataset size {}", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        for idx in &mut by_class {
            idx.shuffle(&mut rng);
        }
        let base = size / self.classes;
        let extra = size % self.classes;
        let mut chosen = Vec::with_capacity(size);
        for (c, idx) in by_class.iter().enumerate() {
            let want = base + usize::from(c < extra);
            if idx.len() < want {
                return Err(Error::param(
                    "subset_size",
                    format!("class {c} has {} samples, {want} requested", idx.len()),
                ));
            }
            chosen.extend_from_slice(&idx[..want]);
        }
        chosen.sort_unstable();
        Ok(self.select(&chosen))
    }

    /// Batches in a seeded random order (or dataset order when `order_seed` is
    /// `None`). With `augment`, each image is randomly shifted within
    /// `padding` pixels (zero fill) and flipped horizontally with probability ½.
    pub fn batches(
        &self,
        batch_size: usize,
        order_seed: Option<u64>,
        augment: Option<(usize, &mut ChaCha8Rng)>,
        drop_last: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = order_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let mut augment = augment;
        let mut out = Vec::with_capacity(self.len() / batch_size + 1);
        for chunk in order.chunks(batch_size) {
            if drop_last && chunk.len() < batch_size {
                break;
            }
            let mut pixels = Vec::with_capacity(chunk.len() * self.image_len());
            for &i in chunk {
                match augment.as_mut() {
                    Some((pad, rng)) => pixels.extend(self.crop_flip(i, *pad, rng)),
                    None => pixels.extend_from_slice(self.image(i)),
                }
            }
            let labels: Vec<u32> = chunk.iter().map(|&i| self.labels[i]).collect();
            out.push(Batch {
                images: Tensor::from_vec(pixels, (chunk.len(), self.channels, self.height, self.width), device)?
                    .to_dtype(dtype)?,
                labels: Tensor::from_vec(labels, chunk.len(), device)?,
            });
        }
        Ok(out)
    }

    fn crop_flip(&self, i: usize, pad: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let (h, w) = (self.height as isize, self.width as isize);
        let p = pad as isize;
        let dy = rng.random_range(-(p as i64)..=p as i64) as isize;
        let dx = rng.random_range(-(p as i64)..=p as i64) as isize;
        let flip = rng.random_bool(0.5);
        let src = self.image(i);
        let mut out = vec![0.0f32; src.len()];
        for c in 0..self.channels as isize {
            for y in 0..h {
                let sy = y + dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx + dx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    out[((c * h + y) * w + x) as usize] = src[((c * h + sy) * w + sx) as usize];
                }
            }
        }
        out
    }
}

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

fn read_file(path: &Path, hint: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
        hint: hint.to_string(),
    })
}

/// Parses CIFAR binary records: `label_bytes` header bytes (the last one is
/// the label) followed by 3×32×32 pixels.
fn parse_cifar(bytes: &[u8], label_bytes: usize, classes: usize, out: &mut Dataset) -> Result<()> {
    let record = label_bytes + 3072;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Config(format!("CIFAR file length {} is not a multiple of {record}", bytes.len())));
    }
    for rec in bytes.chunks(record) {
        let label = rec[label_bytes - 1] as u32;
        if label as usize >= classes {
            return Err(Error::Config(format!("label {label} out of range for {classes} classes")));
        }
        out.labels.push(label);
        for (c, plane) in rec[label_bytes..].chunks(1024).enumerate() {
            out.images
                .extend(plane.iter().map(|&v| (v as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok(())
}

fn load_cifar(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    let (classes, label_bytes, train_files, test_files, hint) = match kind {
        DatasetKind::Cifar10 => (
            10,
            1,
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect::<Vec<_>>(),
            vec!["test_batch.bin".to_string()],
            " (download https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz and point dataset.path at the extracted cifar-10-batches-bin directory)",
        ),
        DatasetKind::Cifar100 => (
            100,
            2,
            vec!["train.bin".to_string()],
            vec!["test.bin".to_string()],
            " (download https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz and point dataset.path at the extracted cifar-100-binary directory)",
        ),
        DatasetKind::Synthetic => unreachable!("synthetic data is generated, not loaded"),
    };
    let empty = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        height: 32,
        width: 32,
        classes,
    };
    let mut train = empty.clone();
    for f in &train_files {
        parse_cifar(&read_file(&dir.join(f), hint)?, label_bytes, classes, &mut train)?;
    }
    let mut test = empty;
    for f in &test_files {
        parse_cifar(&read_file(&dir.join(f), hint)?, label_bytes, classes, &mut test)?;
    }
    Ok((train, test))
}

/// Smooth random pattern: a coarse Gaussian grid bilinearly upsampled.
fn smooth_pattern(rng: &mut ChaCha8Rng, channels: usize, size: usize) -> Vec<f32> {
    let grid = 4usize;
    let coarse: Vec<f64> = (0..channels * grid * grid).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 * (grid - 1) as f64 / (size - 1).max(1) as f64;
                let fx = x as f64 * (grid - 1) as f64 / (size - 1).max(1) as f64;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                let g = |yy: usize, xx: usize| coarse[(c * grid + yy) * grid + xx];
                let v = (1.0 - wy) * ((1.0 - wx) * g(y0, x0) + wx * g(y0, x1))
                    + wy * ((1.0 - wx) * g(y1, x0) + wx * g(y1, x1));
                out.push(v as f32);
            }
        }
    }
    out
}

/// Prototype images of the synthetic mixture, indexed `[class][mode]`.
pub fn synthetic_prototypes(cfg: &SyntheticConfig) -> Vec<Vec<Vec<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    (0..cfg.classes)
        .map(|_| {
            (0..cfg.modes_per_class.max(1))
                .map(|_| smooth_pattern(&mut rng, cfg.channels, cfg.image_size))
                .collect()
        })
        .collect()
}

/// Class-balanced draws of `prototype·signal + distractor·ν + noise·ξ`,
/// where `ν` is a smooth class-independent pattern drawn per sample.
pub fn generate_synthetic(cfg: &SyntheticConfig, samples: usize, stream: u64) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.image_size < 2 || cfg.channels == 0 {
        return Err(Error::Config("synthetic data needs >= 2 classes, image_size >= 2, channels >= 1".into()));
    }
    let protos = synthetic_prototypes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream + 1)));
    let len = cfg.channels * cfg.image_size * cfg.image_size;
    let mut images = Vec::with_capacity(samples * len);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % cfg.classes;
        let mode = rng.random_range(0..protos[class].len());
        let distractor = smooth_pattern(&mut rng, cfg.channels, cfg.image_size);
        for (p, d) in protos[class][mode].iter().zip(&distractor) {
            let xi: f64 = rng.sample(StandardNormal);
            images.push((cfg.signal * *p as f64 + cfg.distractor * *d as f64 + cfg.noise * xi) as f32);
        }
        labels.push(class as u32);
    }
    Ok(Dataset {
        images,
        labels,
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        classes: cfg.classes,
    })
}

/// Train and evaluation splits for `cfg`; subsets are drawn with `seed`.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, eval) = match cfg.kind {
        DatasetKind::Synthetic => (
            generate_synthetic(&cfg.synthetic, cfg.synthetic.train_samples, 0)?,
            generate_synthetic(&cfg.synthetic, cfg.synthetic.eval_samples, 1)?,
        ),
        kind => {
            let dir = cfg.path.as_ref().ok_or_else(|| {
                Error::Config("dataset.path is required for CIFAR datasets (directory of the binary archive)".into())
            })?;
            load_cifar(kind, dir)?
        }
    };
    let train = match cfg.subset_size {
        Some(n) => train.balanced_subset(n, seed)?,
        None => train,
    };
    let eval = match cfg.eval_subset_size {
        Some(n) => eval.balanced_subset(n, seed)?,
        None => eval,
    };
    Ok((train, eval))
}
