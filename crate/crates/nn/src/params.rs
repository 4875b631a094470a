//! Named parameter storage shared between layers, the tape and the optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Ordered set of named tensors. Each store carries a process-unique id so a
/// tape can hold parameters from several stores at once.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore { uid: fresh_uid(), entries: self.entries.clone() }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { uid: fresh_uid(), entries: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(NnError::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Rebuilds a store from raw entries (checkpoint loading).
    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        ParamStore { uid: fresh_uid(), entries }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: fresh_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Seeded parameter initializer. Weights use uniform fan-in scaling
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn fan_in_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_gets_fresh_uid() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2]));
        let c = s.clone();
        assert_ne!(s.uid(), c.uid());
        assert_eq!(s.entries(), c.entries());
    }

    #[test]
    fn initializer_is_seeded() {
        let a: Tensor<f64> = Initializer::new(3).fan_in_uniform(&[4, 4], 4);
        let b: Tensor<f64> = Initializer::new(3).fan_in_uniform(&[4, 4], 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }
}
