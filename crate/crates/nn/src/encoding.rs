//! Deterministic sequence encodings added to the learned input embeddings.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sinusoidal position table, `t x d_model`:
/// column `2i` is `sin(t / 10000^(2i/d_model))`, column `2i+1` the cosine.
pub fn positional_encoding<T: Real>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(NnError::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    if len == 0 {
        return Err(NnError::Config("positional encoding needs at least one timestamp".into()));
    }
    let mut data = vec![T::zero(); len * d_model];
    for t in 0..len {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = T::of(angle.sin());
            data[t * d_model + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::new(&[len, d_model], data)
}

/// Scalar time feature `t / total - 0.5`, in `[-0.5, 0.5]` for `0 <= t <= total`.
pub fn temporal_encoding(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(NnError::Config("temporal encoding needs a positive total".into()));
    }
    if t > total {
        return Err(NnError::Config(format!("timestamp {t} exceeds total {total}")));
    }
    Ok(t as f64 / total as f64 - 0.5)
}

/// Temporal encodings of timestamps `start..start+len` broadcast to `d_model`.
pub fn temporal_table<T: Real>(start: usize, len: usize, total: usize, d_model: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(len * d_model);
    for t in start..start + len {
        let v = T::of(temporal_encoding(t, total)?);
        data.extend(std::iter::repeat_n(v, d_model));
    }
    Tensor::new(&[len, d_model], data)
}
