//! Newline-delimited JSON metrics log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffkd::LossBundle;
use crate::error::{Error, Result};

pub const GAMMA_BUCKETS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
}

/// Summary of `γ` values over a logging window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
    /// Counts over `GAMMA_BUCKETS` equal-width buckets spanning [0, 1].
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct GammaAccumulator {
    sum: f64,
    min: f64,
    max: f64,
    count: u64,
    histogram: [u64; GAMMA_BUCKETS],
}

/// Bucket index of `v` in `[0, 1]`; 1.0 falls into the last bucket.
pub fn gamma_bucket(v: f64) -> usize {
    ((v * GAMMA_BUCKETS as f64) as usize).min(GAMMA_BUCKETS - 1)
}

impl GammaAccumulator {
    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            if self.count == 0 {
                self.min = v;
                self.max = v;
            } else {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
            self.sum += v;
            self.count += 1;
            self.histogram[gamma_bucket(v)] += 1;
        }
    }

    pub fn merge(&mut self, other: &GammaAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        self.sum += other.sum;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        for (a, b) in self.histogram.iter_mut().zip(other.histogram) {
            *a += b;
        }
    }

    /// Stats so far, or `None` when nothing was recorded.
    pub fn stats(&self) -> Option<GammaStats> {
        (self.count > 0).then(|| GammaStats {
            mean: self.sum / self.count as f64,
            min: self.min,
            max: self.max,
            count: self.count,
            histogram: self.histogram.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Losses of the most recent batch at a logging step.
    Step,
    /// Means over an epoch plus evaluation.
    Epoch,
    /// Final record of a run aborted on a non-finite loss.
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_stats: Option<GammaStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalResult>,
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics log", e))?;
        self.out.flush().map_err(|e| Error::io("metrics log", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
