use std::sync::Arc;

use crate::error::{NnError, Result};
use crate::real::Real;

/// Dense row-major array of rank 1 to 3. Storage is shared between clones
/// and copied on the first write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(NnError::Shape(format!("rank must be 1..=3, got {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(NnError::Shape(format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting bad shapes and non-finite values.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let count = check_shape(shape)?;
        if count != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {count} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!("element {i} of tensor {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    /// Internal constructor for kernel outputs whose shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::zero(); count]) }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let count = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; count]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let count = check_shape(shape).expect("valid shape");
        Tensor { shape: shape.to_vec(), data: Arc::new((0..count).map(&mut f).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Size of the trailing (feature) axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when every axis but the last is flattened.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let count = check_shape(shape)?;
        if count != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D index `(row, col)` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| U::of(v.as_f64())).collect()) }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| NnError::Shape("cannot stack zero tensors".into()))?;
        if first.shape.len() >= 3 {
            return Err(NnError::Shape("stack would exceed rank 3".into()));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(NnError::Shape(format!("stack shape mismatch {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (*a - *b).abs().as_f64()).fold(0.0, f64::max)
    }
}
