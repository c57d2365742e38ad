//! Distances between student and teacher outputs.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Mse,
    Kl,
    /// Pearson-correlation distance (inter-class plus intra-batch).
    Dist,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "kl" => Ok(Self::Kl),
            "dist" => Ok(Self::Dist),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

/// A distance plus the temperature used by the KL variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub kind: DistanceKind,
    pub temperature: f64,
}

impl Distance {
    pub fn new(kind: DistanceKind, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::param("temperature", format!("{temperature} must be > 0")));
        }
        Ok(Self { kind, temperature })
    }

    pub fn mse() -> Self {
        Self {
            kind: DistanceKind::Mse,
            temperature: 1.0,
        }
    }

    /// `d(student, teacher)`.
    pub fn compute(&self, student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
        match self.kind {
            DistanceKind::Mse => mse_distance(student, teacher),
            DistanceKind::Kl => kl_divergence_distance(student, teacher, self.temperature),
            DistanceKind::Dist => dist_correlation_distance(student, teacher),
        }
    }
}

fn same_shape(stage: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(stage, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn require_rank2(stage: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(stage, format!("expected (N, classes), got {:?}", t.dims())));
    }
    Ok(())
}

/// Mean over all elements of `(a − b)²`.
pub fn mse_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse distance", a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// `τ² · mean_n KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_divergence_distance(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::param("temperature", format!("{temperature} must be > 0")));
    }
    same_shape("kl distance", student_logits, teacher_logits)?;
    require_rank2("kl distance", student_logits)?;
    let n = student_logits.dim(0)? as f64;
    let log_q = candle_nn::ops::log_softmax(&(student_logits / temperature)?, D::Minus1)?;
    let log_p = candle_nn::ops::log_softmax(&(teacher_logits / temperature)?, D::Minus1)?;
    let p = log_p.exp()?;
    let kl = (p * (log_p - log_q)?)?.sum_all()?;
    Ok((kl * (temperature * temperature / n))?)
}

/// Pearson correlation between matching rows of two `(R, K)` tensors.
/// Rows with zero variance in either input get correlation 0.
fn rowwise_pearson(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ac = a.broadcast_sub(&a.mean_keepdim(1)?)?;
    let bc = b.broadcast_sub(&b.mean_keepdim(1)?)?;
    let cov = (&ac * &bc)?.sum(1)?;
    let var_prod = (ac.sqr()?.sum(1)? * bc.sqr()?.sum(1)?)?;
    let mask = var_prod.gt(1e-24)?.to_dtype(a.dtype())?;
    // masked rows get denominator 1 so neither value nor gradient blows up
    let safe = (var_prod + mask.affine(-1.0, 1.0)?)?.sqrt()?;
    Ok((cov / safe)?.mul(&mask)?)
}

/// `1 − ρ` averaged over an inter-class term (correlation of each sample's
/// scores) and an intra-class term (correlation of each class across the batch).
pub fn dist_correlation_distance(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    same_shape("dist distance", student_logits, teacher_logits)?;
    require_rank2("dist distance", student_logits)?;
    let inter = inter_class_term(student_logits, teacher_logits)?;
    let intra = intra_class_term(student_logits, teacher_logits)?;
    Ok(((inter + intra)? * 0.5)?)
}

/// `1 − mean_n ρ(student_n, teacher_n)` over rows.
pub fn inter_class_term(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    Ok(rowwise_pearson(student_logits, teacher_logits)?
        .mean_all()?
        .affine(-1.0, 1.0)?)
}

/// `1 − mean_k ρ(student_·k, teacher_·k)` over columns.
pub fn intra_class_term(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    Ok(rowwise_pearson(&student_logits.t()?.contiguous()?, &teacher_logits.t()?.contiguous()?)?
        .mean_all()?
        .affine(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.to_vec()).collect();
        Tensor::new(rows, &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn unknown_distance_is_config_error() {
        assert!(matches!("cosine".parse::<DistanceKind>(), Err(Error::Config(_))));
        assert_eq!("kl".parse::<DistanceKind>().unwrap(), DistanceKind::Kl);
    }

    #[test]
    fn shape_mismatch() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[1.0, 2.0, 3.0]]);
        assert!(mse_distance(&a, &b).is_err());
        assert!(kl_divergence_distance(&a, &b, 1.0).is_err());
        assert!(kl_divergence_distance(&a, &a, 0.0).is_err());
        assert!(dist_correlation_distance(&a, &b).is_err());
    }

    #[test]
    fn zero_variance_rows_count_as_uncorrelated() {
        let s = t2(&[&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]]);
        let t = t2(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
        let inter = scalar(inter_class_term(&s, &t).unwrap());
        assert!((inter - 0.5).abs() < 1e-12);
        let v = dist_correlation_distance(&s, &t).unwrap();
        assert!(scalar(v).is_finite());
    }

    #[test]
    fn kl_is_asymmetric() {
        let a = t2(&[&[0.0, 1.0, 3.0]]);
        let b = t2(&[&[2.0, 0.0, 0.5]]);
        let ab = scalar(kl_divergence_distance(&a, &b, 1.0).unwrap());
        let ba = scalar(kl_divergence_distance(&b, &a, 1.0).unwrap());
        assert!((ab - ba).abs() > 1e-3);
        let m1 = scalar(mse_distance(&a, &b).unwrap());
        let m2 = scalar(mse_distance(&b, &a).unwrap());
        assert_eq!(m1, m2);
    }
}
