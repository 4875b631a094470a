//! Loss functions and the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    crate::graph::softmax_row(&mut out, None);
    out
}

pub(crate) fn mse<T: Real>(pred: &[T], target: &[T]) -> T {
    let n = T::of(pred.len() as f64);
    pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n
}

pub(crate) fn bce<T: Real>(pred: &[T], target: &[T], eps: T) -> Result<T> {
    let hi = T::one() - eps;
    let mut total = T::zero();
    for (&p, &y) in pred.iter().zip(target) {
        if y != T::zero() && y != T::one() {
            return Err(NnError::Domain(format!("bce target must be 0 or 1, got {y}")));
        }
        let p = p.max(eps).min(hi);
        total = total - (y * p.ln() + (T::one() - y) * (T::one() - p).ln());
    }
    Ok(total / T::of(pred.len() as f64))
}

/// Mean of squared elementwise differences.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!("mse: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(mse(pred.data(), target.data()))
}

/// Mean binary cross-entropy with the standard clamp.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!("bce: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    bce(pred.data(), target.data(), T::of(BCE_EPS))
}

/// Weights of the forecasting (`lambda_f`) and trigger (`lambda_t`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_f: 1.0, lambda_t: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_f: f64, lambda_t: f64) -> Result<Self> {
        let w = LossWeights { lambda_f, lambda_t };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_t", self.lambda_t)] {
            if !v.is_finite() || v < 0.0 {
                return Err(NnError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `label + lambda_f * forecast + lambda_t * trigger`.
pub fn composite_loss(label: f64, forecast: f64, trigger: f64, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [("label", label), ("forecast", forecast), ("trigger", trigger)] {
        if !v.is_finite() || v < 0.0 {
            return Err(NnError::Domain(format!("{name} loss must be finite and non-negative, got {v}")));
        }
    }
    Ok(label + weights.lambda_f * forecast + weights.lambda_t * trigger)
}
