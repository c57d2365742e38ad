//! Attention-map saliency and γ-statistics figures.
//!
//! Every image written here has a sibling CSV with the numbers it shows;
//! the CSVs are the contract, the PNGs are for eyeballing.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_dataset, DatasetKind, CIFAR_MEAN, CIFAR_STD};
use crate::diffkd::FeatureTap;
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, RecordKind, GAMMA_BUCKETS};
use crate::train::Session;

pub const DEFAULT_ATTENTION_TAU: f64 = 0.5;

/// Spatial saliency `V = H·W·softmax(X′/τ)` where `X′` is the channel mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `(H, W)`.
    pub values: Vec<f64>,
    pub tau: f64,
}

impl AttentionMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for row in self.values.chunks(self.width) {
            w.write_record(row.iter().map(|v| format!("{v:.9}")))
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Min–max normalized, viridis-like colors, each cell drawn `scale`×`scale`.
    pub fn render(&self, scale: usize) -> RgbImage {
        let scale = scale.max(1);
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        RgbImage::from_fn((self.width * scale) as u32, (self.height * scale) as u32, |x, y| {
            let v = self.get(y as usize / scale, x as usize / scale);
            colormap((v - lo) / span)
        })
    }
}

/// Attention map of a rank-3 `(C, H, W)` feature.
pub fn attention_map(feature: &Tensor, tau: f64) -> Result<AttentionMap> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", format!("must be positive and finite, got {tau}")));
    }
    let (_, h, w) = feature
        .dims3()
        .map_err(|_| Error::shape("attention map", format!("expected (C, H, W), got {:?}", feature.dims())))?;
    let mean = feature.to_dtype(DType::F64)?.mean(0)?.flatten_all()?;
    let soft = candle_nn::ops::softmax(&(mean / tau)?, D::Minus1)?;
    let values = (soft * (h * w) as f64)?.to_vec1::<f64>()?;
    Ok(AttentionMap {
        height: h,
        width: w,
        values,
        tau,
    })
}

// Piecewise-linear approximation of viridis.
const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn colormap(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (VIRIDIS.len() - 1) as f64;
    let i = (pos as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Aggregated γ statistics from a metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaReport {
    /// Counts over `GAMMA_BUCKETS` equal-width buckets of [0, 1].
    pub buckets: Vec<u64>,
    /// `(epoch, mean γ)` per epoch, in order.
    pub epoch_means: Vec<(usize, f64)>,
}

/// Sums the γ histograms of epoch records (falling back to step records when
/// a log has no epoch records) and collects the per-epoch means.
pub fn gamma_report(records: &[MetricRecord]) -> Result<GammaReport> {
    let with_stats = |kind: RecordKind| {
        records
            .iter()
            .filter(move |r| r.kind == kind)
            .filter_map(|r| r.gamma_stats.as_ref().map(|s| (r.epoch, s)))
            .collect::<Vec<_>>()
    };
    let epochs = with_stats(RecordKind::Epoch);
    let source = if epochs.is_empty() { with_stats(RecordKind::Step) } else { epochs.clone() };
    if source.is_empty() {
        return Err(Error::EmptyInput("metrics log has no gamma statistics".into()));
    }
    let mut buckets = vec![0u64; GAMMA_BUCKETS];
    for (_, s) in &source {
        for (b, c) in buckets.iter_mut().zip(&s.histogram) {
            *b += c;
        }
    }
    let epoch_means = if epochs.is_empty() {
        // step records only: weight each window by its count
        let mut out: Vec<(usize, f64, u64)> = Vec::new();
        for (e, s) in &source {
            match out.last_mut() {
                Some(last) if last.0 == *e => {
                    last.1 += s.mean * s.count as f64;
                    last.2 += s.count;
                }
                _ => out.push((*e, s.mean * s.count as f64, s.count)),
            }
        }
        out.into_iter().map(|(e, sum, n)| (e, sum / n as f64)).collect()
    } else {
        epochs.iter().map(|(e, s)| (*e, s.mean)).collect()
    };
    Ok(GammaReport { buckets, epoch_means })
}

/// Files written by [`gamma_histogram`].
#[derive(Debug, Clone)]
pub struct GammaFigures {
    pub report: GammaReport,
    pub histogram_csv: PathBuf,
    pub histogram_png: PathBuf,
    pub curve_csv: PathBuf,
    pub curve_png: PathBuf,
}

/// Writes the γ bucket table, histogram plot and mean-γ-per-epoch curve into `out_dir`.
pub fn gamma_histogram(records: &[MetricRecord], out_dir: &Path) -> Result<GammaFigures> {
    let report = gamma_report(records)?;
    let histogram_csv = out_dir.join("gamma_histogram.csv");
    let mut w = csv_writer(&histogram_csv)?;
    w.write_record(["bucket_low", "bucket_high", "count"])
        .map_err(|e| csv_error(&histogram_csv, e))?;
    for (i, c) in report.buckets.iter().enumerate() {
        let lo = i as f64 / GAMMA_BUCKETS as f64;
        let hi = (i + 1) as f64 / GAMMA_BUCKETS as f64;
        w.write_record([format!("{lo:.1}"), format!("{hi:.1}"), c.to_string()])
            .map_err(|e| csv_error(&histogram_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(&histogram_csv, e))?;

    let curve_csv = out_dir.join("gamma_curve.csv");
    let mut w = csv_writer(&curve_csv)?;
    w.write_record(["epoch", "mean_gamma"]).map_err(|e| csv_error(&curve_csv, e))?;
    for (e, m) in &report.epoch_means {
        w.write_record([e.to_string(), format!("{m:.9}")])
            .map_err(|e| csv_error(&curve_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(&curve_csv, e))?;

    let histogram_png = out_dir.join("gamma_histogram.png");
    let counts: Vec<f64> = report.buckets.iter().map(|&c| c as f64).collect();
    save_png(&bar_chart(&counts), &histogram_png)?;
    let curve_png = out_dir.join("gamma_curve.png");
    let means: Vec<f64> = report.epoch_means.iter().map(|&(_, m)| m).collect();
    save_png(&line_chart(&means, 0.0, 1.0), &curve_png)?;
    Ok(GammaFigures {
        report,
        histogram_csv,
        histogram_png,
        curve_csv,
        curve_png,
    })
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 20;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const INK: Rgb<u8> = Rgb([33, 145, 140]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, BG);
    for x in MARGIN..PLOT_W - MARGIN / 2 {
        img.put_pixel(x, PLOT_H - MARGIN, AXIS);
    }
    for y in MARGIN / 2..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn bar_chart(values: &[f64]) -> RgbImage {
    let mut img = canvas();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let inner_w = PLOT_W - MARGIN - MARGIN / 2;
    let inner_h = (PLOT_H - MARGIN - MARGIN / 2) as f64;
    let bar_w = inner_w / values.len().max(1) as u32;
    for (i, &v) in values.iter().enumerate() {
        let h = if max > 0.0 { (v / max * inner_h).round() as u32 } else { 0 };
        let x0 = MARGIN + 1 + i as u32 * bar_w;
        for x in x0..x0 + bar_w.saturating_sub(2) {
            for y in (PLOT_H - MARGIN - h)..(PLOT_H - MARGIN) {
                img.put_pixel(x, y, INK);
            }
        }
    }
    img
}

fn line_chart(values: &[f64], lo: f64, hi: f64) -> RgbImage {
    let mut img = canvas();
    let inner_w = (PLOT_W - MARGIN - MARGIN / 2) as f64;
    let inner_h = (PLOT_H - MARGIN - MARGIN / 2) as f64;
    let point = |i: usize, v: f64| {
        let fx = if values.len() > 1 { i as f64 / (values.len() - 1) as f64 } else { 0.5 };
        let fy = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        (MARGIN as f64 + fx * inner_w, (PLOT_H - MARGIN) as f64 - fy * inner_h)
    };
    for i in 0..values.len() {
        let (x0, y0) = point(i, values[i]);
        let (x1, y1) = if i + 1 < values.len() { point(i + 1, values[i + 1]) } else { (x0, y0) };
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1), (-1, 0), (0, -1)] {
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < PLOT_W && (py as u32) < PLOT_H {
                    img.put_pixel(px as u32, py as u32, INK);
                }
            }
        }
    }
    img
}

/// What `visualize` should run on.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    /// An image file, resized to the model's input size.
    Image(PathBuf),
    /// The first `n` images of the evaluation split.
    Batch(usize),
}

impl std::str::FromStr for VisualInput {
    type Err = Error;

    /// `batch`, `batch:<n>`, or a path to an image.
    fn from_str(s: &str) -> Result<Self> {
        if s == "batch" {
            return Ok(VisualInput::Batch(8));
        }
        if let Some(n) = s.strip_prefix("batch:") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::param("input", format!("bad batch size in `{s}`")))?;
            if n == 0 {
                return Err(Error::param("input", "batch size must be positive"));
            }
            return Ok(VisualInput::Batch(n));
        }
        Ok(VisualInput::Image(PathBuf::from(s)))
    }
}

/// Loads an image file as a normalized `(1, C, H, W)` tensor.
pub fn load_image(path: &Path, session: &Session, height: usize, width: usize) -> Result<Tensor> {
    if session.in_channels != 3 {
        return Err(Error::Config(format!(
            "image inputs need a 3-channel model, this one takes {}",
            session.in_channels
        )));
    }
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
        .to_rgb8();
    let img = image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
    let mut planes = vec![0.0f32; 3 * height * width];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            planes[c * height * width + y as usize * width + x as usize] = p[c] as f32 / 255.0;
        }
    }
    match session.config.dataset.kind {
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            for c in 0..3 {
                for v in &mut planes[c * height * width..(c + 1) * height * width] {
                    *v = (*v - CIFAR_MEAN[c]) / CIFAR_STD[c];
                }
            }
        }
        DatasetKind::Synthetic => {
            // per-channel standardization matches the unit-scale synthetic data
            for plane in planes.chunks_mut(height * width) {
                let n = plane.len() as f32;
                let mean = plane.iter().sum::<f32>() / n;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
                let std = var.sqrt().max(1e-6);
                plane.iter_mut().for_each(|v| *v = (*v - mean) / std);
            }
        }
    }
    Ok(Tensor::from_vec(planes, (1, 3, height, width), &session.device)?.to_dtype(session.dtype)?)
}

/// Attention maps for one input sample.
#[derive(Debug, Clone)]
pub struct SampleMaps {
    pub teacher: AttentionMap,
    pub student: AttentionMap,
    /// Student latent after noise matching and denoising, when the run has a
    /// backbone head.
    pub denoised: Option<AttentionMap>,
}

/// Computes teacher, student and denoised-student attention maps for each
/// sample of `images`, and writes PNG + CSV files into `out_dir`.
pub fn visualize(session: &Session, images: &Tensor, tau: f64, out_dir: &Path, seed: u64) -> Result<Vec<SampleMaps>> {
    let teacher = session.teacher_outputs(images)?;
    let student = session.student.forward(images, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let denoised = match &session.diffkd {
        Some(kd) => match kd
            .heads()
            .iter()
            .find(|h| h.config().feature_tap == FeatureTap::Backbone)
        {
            Some(head) => Some(kd.denoise_student(head, &student.feature, &mut rng)?.1.latent.detach()),
            None => None,
        },
        None => None,
    };
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let maps = SampleMaps {
            teacher: attention_map(&teacher.feature.get(i)?, tau)?,
            student: attention_map(&student.feature.get(i)?, tau)?,
            denoised: match &denoised {
                Some(d) => Some(attention_map(&d.get(i)?, tau)?),
                None => None,
            },
        };
        let mut named = vec![("teacher", &maps.teacher), ("student", &maps.student)];
        if let Some(d) = &maps.denoised {
            named.push(("denoised", d));
        }
        for (name, map) in named {
            map.write_csv(&out_dir.join(format!("sample{i}_{name}.csv")))?;
            save_png(&map.render(16), &out_dir.join(format!("sample{i}_{name}.png")))?;
        }
        out.push(maps);
    }
    Ok(out)
}

/// Resolves a [`VisualInput`] into a batch of model inputs.
pub fn input_images(session: &Session, input: &VisualInput) -> Result<Tensor> {
    let (_, eval) = load_dataset(&session.config.dataset, session.config.seed)?;
    match input {
        VisualInput::Image(path) => load_image(path, session, eval.height, eval.width),
        VisualInput::Batch(n) => {
            let n = (*n).min(eval.len());
            if n == 0 {
                return Err(Error::EmptyInput("evaluation split is empty".into()));
            }
            let data = eval.images[..n * eval.image_len()].to_vec();
            Ok(Tensor::from_vec(data, (n, eval.channels, eval.height, eval.width), &Device::Cpu)?
                .to_dtype(session.dtype)?)
        }
    }
}
