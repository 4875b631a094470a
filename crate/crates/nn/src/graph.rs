//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so walking them backwards is a valid
//! topological order for [`Graph::backward`]. Kernels are fused at the level
//! the models need (linear, attention, conv, norms) rather than scalar ops.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean `rows x cols` attention mask; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(NnError::Shape(format!(
                "mask of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        let mask = Mask { rows, cols, allowed };
        mask.validate()?;
        Ok(mask)
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::causal_offset(n, n, 0)
    }

    /// Query `i` sees keys `j <= i + offset`.
    pub fn causal_offset(rows: usize, cols: usize, offset: usize) -> Self {
        let allowed = (0..rows).flat_map(|i| (0..cols).map(move |j| j <= i + offset)).collect();
        Mask { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !self.allowed[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a) {
                return Err(NnError::InvalidMask { row: r });
            }
        }
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, training: bool },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Option<Mask>, weights: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, pad_left: usize, cols: Vec<T> },
    MeanAxis { x: Var, axis: usize },
    Softmax { a: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
    Mse { pred: Var, target: Vec<T> },
    Bce { pred: Var, target: Vec<T>, eps: T },
    Dot { x: Var, w: Vec<T> },
    MulConst { x: Var, m: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
    grads: Vec<Option<Vec<T>>>,
    batch_stats: HashMap<usize, BatchStats<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// (batch, seq, width) view of a rank-2 or rank-3 sequence tensor.
fn seq_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, d] => Ok((1, n, d)),
        [b, n, d] => Ok((b, n, d)),
        _ => Err(NnError::Shape(format!("expected a rank-2 or rank-3 sequence, got {shape:?}"))),
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new(), batch_stats: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that does receive a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    /// Buffers are returned as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Param, entry.trainable);
        self.params.insert(key, v);
        v
    }

    /// `x[..., in] @ w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(NnError::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(NnError::Shape(format!("linear: bias {:?} vs out {}", self.shape(b), ws[1])));
            }
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).rows();
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(m, k, n, T::one(), self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), beta, &mut out, (n, 1));
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    /// Elementwise sum; `b`'s shape must equal `a`'s or be a suffix of it
    /// (broadcast over the leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NnError::Shape(format!("add: {sb:?} does not broadcast to {sa:?}")));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o = *o + y;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    /// `sum_i c_i * v_i` over equally shaped vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, c0) = *terms.first().ok_or_else(|| NnError::Shape("empty weighted sum".into()))?;
        let mut acc = self.scale(first, c0);
        for &(v, c) in &terms[1..] {
            let s = self.scale(v, c);
            if self.shape(s) != self.shape(acc) {
                return Err(NnError::Shape("weighted_sum: shape mismatch".into()));
            }
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    /// Multiplies by a fixed same-shape tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, m: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if m.len() != t.len() {
            return Err(NnError::Shape("mul_const: length mismatch".into()));
        }
        let out = t.data().iter().zip(&m).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst { x, m }, rg))
    }

    /// Row-wise layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if d < 2 {
            return Err(NnError::Shape("layer_norm needs width >= 2".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::Shape(format!("layer_norm: affine params must have width {d}")));
        }
        let rows = xt.rows();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bt[c];
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Training-mode batch normalization: per channel (last axis) statistics
    /// over every other axis. The batch statistics are retrievable through
    /// [`Graph::batch_stats`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim();
        let rows = xt.rows();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let n = T::of(rows as f64);
        for row in xt.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        for row in xt.data().chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / n);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = self.batch_norm_with(x, gamma, beta, &mean, rstd, true)?;
        self.batch_stats.insert(v.0, BatchStats { mean, var });
        Ok(v)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_inference(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let rstd = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.batch_norm_with(x, gamma, beta, running_mean, rstd, false)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: Vec<T>,
        training: bool,
    ) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || rstd.len() != c {
            return Err(NnError::Shape(format!("batch_norm: channel count {c} mismatch")));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xt.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (hrow, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                hrow[j] = (hrow[j] - mean[j]) * rstd[j];
                orow[j] = hrow[j] * g[j] + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchNorm { x, gamma, beta, xhat, rstd, training }, rg))
    }

    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        self.batch_stats.get(&v.0)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[B, n, heads*d_k]`, `k` is `[B, m, heads*d_k]`, `v` is
    /// `[B, m, heads*d_v]` (rank 2 means `B = 1`). Head `h` uses columns
    /// `h*d_k..(h+1)*d_k`. The result concatenates the heads: `[B, n, heads*d_v]`.
    /// Masked keys get weight exactly zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (bq, n, dq) = seq_dims(self.shape(q))?;
        let (bk, m, dk) = seq_dims(self.shape(k))?;
        let (bv, mv, dv) = seq_dims(self.shape(v))?;
        if bq != bk || bq != bv || m != mv || dq != dk || self.shape(q).len() != self.shape(k).len() {
            return Err(NnError::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(NnError::Config(format!("attention: widths {dq}/{dv} not divisible by {heads} heads")));
        }
        if let Some(mk) = mask {
            if mk.rows != n || mk.cols != m {
                return Err(NnError::Shape(format!("attention: mask {}x{} vs scores {n}x{m}", mk.rows, mk.cols)));
            }
            mk.validate()?;
        }
        let (hk, hv) = (dq / heads, dv / heads);
        let scale = T::one() / T::of(hk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![T::zero(); bq * heads * n * m];
        let mut out = vec![T::zero(); bq * n * dv];
        for b in 0..bq {
            for h in 0..heads {
                let w = &mut weights[(b * heads + h) * n * m..][..n * m];
                T::gemm(
                    n,
                    hk,
                    m,
                    scale,
                    &qd[b * n * dq + h * hk..],
                    (dq, 1),
                    &kd[b * m * dq + h * hk..],
                    (1, dq),
                    T::zero(),
                    w,
                    (m, 1),
                );
                for i in 0..n {
                    let row = &mut w[i * m..(i + 1) * m];
                    softmax_row(row, mask.map(|mk| &mk.allowed[i * m..(i + 1) * m]));
                }
                T::gemm(
                    n,
                    m,
                    hv,
                    T::one(),
                    w,
                    (m, 1),
                    &vd[b * m * dv + h * hv..],
                    (dv, 1),
                    T::zero(),
                    &mut out[b * n * dv + h * hv..],
                    (dv, 1),
                );
            }
        }
        let mut shape = self.shape(q).to_vec();
        *shape.last_mut().unwrap() = dv;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention { q, k, v, heads, mask: mask.cloned(), weights },
            rg,
        ))
    }

    /// Attention weights `[B, heads, n, m]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// 1-D convolution along the time axis with "same" padding.
    ///
    /// `x` is `[B, L, C_in]`, `w` is `[K, C_in, C_out]`, `b` is `[C_out]`.
    /// Output `t` sees inputs `t - pad_left ..= t - pad_left + K - 1` where
    /// `pad_left = (K - 1) / 2`; the extra pad for even kernels goes right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, len, cin) = seq_dims(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(NnError::Shape(format!("conv1d: weight {ws:?} vs input channels {cin}")));
        }
        let (kernel, cout) = (ws[0], ws[2]);
        if self.shape(b) != [cout] {
            return Err(NnError::Shape("conv1d: bias width mismatch".into()));
        }
        let pad_left = (kernel - 1) / 2;
        let pad_right = kernel - 1 - pad_left;
        if kernel > len + pad_left + pad_right {
            return Err(NnError::Config(format!("conv1d: kernel {kernel} longer than padded input")));
        }
        let kc = kernel * cin;
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); bs * len * kc];
        im2col(xd, &mut cols, bs, len, cin, kernel, pad_left);
        let mut out = vec![T::zero(); bs * len * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            bs * len,
            kc,
            cout,
            T::one(),
            &cols,
            (kc, 1),
            self.value(w).data(),
            (cout, 1),
            T::one(),
            &mut out,
            (cout, 1),
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, b, pad_left, cols }, rg))
    }

    /// Arithmetic mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(NnError::Shape(format!("mean_axis: axis {axis} of {shape:?}")));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::of(alen as f64);
        for o in 0..outer {
            for a in 0..alen {
                let src = &xd[(o * alen + a) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MeanAxis { x, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row, None);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NnError::Shape(format!("slice {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * alen + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(NnError::Shape(format!("concat: {sa:?} and {sb:?} on axis {axis}")));
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..][..la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..][..lb * inner]);
        }
        let mut oshape = sa;
        oshape[axis] = la + lb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Concat { a, b, axis }, rg))
    }

    /// Mean squared error against a constant target; returns a scalar node.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(NnError::Shape(format!("mse: {:?} vs {:?}", p.shape(), target.shape())));
        }
        let loss = crate::loss::mse(p.data(), target.data());
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }

    /// Binary cross-entropy of probabilities against {0,1} targets, with the
    /// probabilities clamped to `[eps, 1 - eps]`. Returns a scalar node.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(NnError::Shape(format!("bce: {:?} vs {:?}", p.shape(), target.shape())));
        }
        let loss = crate::loss::bce(p.data(), target.data(), eps)?;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.data().to_vec(), eps }, rg))
    }

    /// `sum(x * w)` for a constant `w`; used to scalarize outputs.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != w.shape() {
            return Err(NnError::Shape("dot_const: shape mismatch".into()));
        }
        let s = xt.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w: w.data().to_vec() }, rg))
    }

    /// Accumulates d(root)/d(node) for every node that requires a gradient.
    /// `root` must be a single-element node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`Graph::backward`] root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Per-parameter gradients for `store`, aligned with its ids. Parameters
    /// that were not touched by the pass get `None`.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                self.params.get(&(store.uid(), id.index())).and_then(|&v| if self.rg(v) { self.grad(v) } else { None })
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let xv = self.value(*x);
                let m = xv.rows();
                if self.rg(*x) {
                    let gx = acc(&mut grads[x.0], m * k);
                    T::gemm(m, n, k, T::one(), gy, (n, 1), self.value(*w).data(), (1, n), T::one(), gx, (k, 1));
                }
                if self.rg(*w) {
                    let gw = acc(&mut grads[w.0], k * n);
                    T::gemm(k, m, n, T::one(), xv.data(), (1, k), gy, (n, 1), T::one(), gw, (n, 1));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = acc(&mut grads[b.0], n);
                        for row in gy.chunks(n) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g = *g + d;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], gy.len());
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
                if self.rg(*b) {
                    let bl = self.value(*b).len();
                    let gb = acc(&mut grads[b.0], bl);
                    for chunk in gy.chunks(bl) {
                        gb.iter_mut().zip(chunk).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = acc(&mut grads[a.0], gy.len());
                ga.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *c);
            }
            Op::MulConst { x, m } => {
                let gx = acc(&mut grads[x.0], gy.len());
                for ((g, &d), &mm) in gx.iter_mut().zip(gy).zip(m) {
                    *g = *g + d * mm;
                }
            }
            Op::Relu { a } => {
                let ga = acc(&mut grads[a.0], gy.len());
                for ((g, &d), &o) in ga.iter_mut().zip(gy).zip(y) {
                    if o > T::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::Sigmoid { a } => {
                let ga = acc(&mut grads[a.0], gy.len());
                for ((g, &d), &s) in ga.iter_mut().zip(gy).zip(y) {
                    *g = *g + d * s * (T::one() - s);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let gg = acc(&mut grads[gamma.0], d);
                    for (drow, hrow) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] = gg[c] + drow[c] * hrow[c];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = acc(&mut grads[beta.0], d);
                    for drow in gy.chunks(d) {
                        gb.iter_mut().zip(drow).for_each(|(g, &v)| *g = *g + v);
                    }
                }
                if self.rg(*x) {
                    let gx = acc(&mut grads[x.0], gy.len());
                    let dn = T::of(d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (r, (drow, hrow)) in gy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dh[c] = drow[c] * gam[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            gxr[c] = gxr[c] + rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, training } => {
                let c = rstd.len();
                let rows = gy.len() / c;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dyh = vec![T::zero(); c];
                for (drow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] = sum_dy[j] + drow[j];
                        sum_dyh[j] = sum_dyh[j] + drow[j] * hrow[j];
                    }
                }
                if self.rg(*gamma) {
                    let gg = acc(&mut grads[gamma.0], c);
                    gg.iter_mut().zip(&sum_dyh).for_each(|(g, &v)| *g = *g + v);
                }
                if self.rg(*beta) {
                    let gb = acc(&mut grads[beta.0], c);
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, &v)| *g = *g + v);
                }
                if self.rg(*x) {
                    let gx = acc(&mut grads[x.0], gy.len());
                    let n = T::of(rows as f64);
                    for (r, (drow, hrow)) in gy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let gxr = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let coeff = gam[j] * rstd[j];
                            let v = if *training {
                                coeff * (drow[j] - sum_dy[j] / n - hrow[j] * sum_dyh[j] / n)
                            } else {
                                coeff * drow[j]
                            };
                            gxr[j] = gxr[j] + v;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, mask, weights } => {
                self.backprop_attention(*q, *k, *v, *heads, mask.as_ref(), weights, gy, grads);
            }
            Op::Conv1d { x, w, b, pad_left, cols } => {
                let (bs, len, cin) = seq_dims(self.shape(*x)).expect("checked in forward");
                let ws = self.shape(*w);
                let (kernel, cout) = (ws[0], ws[2]);
                let kc = kernel * cin;
                let rows = bs * len;
                if self.rg(*w) {
                    let gw = acc(&mut grads[w.0], kc * cout);
                    T::gemm(kc, rows, cout, T::one(), cols, (1, kc), gy, (cout, 1), T::one(), gw, (cout, 1));
                }
                if self.rg(*b) {
                    let gb = acc(&mut grads[b.0], cout);
                    for row in gy.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); rows * kc];
                    T::gemm(
                        rows,
                        cout,
                        kc,
                        T::one(),
                        gy,
                        (cout, 1),
                        self.value(*w).data(),
                        (1, cout),
                        T::zero(),
                        &mut gcols,
                        (kc, 1),
                    );
                    let gx = acc(&mut grads[x.0], bs * len * cin);
                    col2im(&gcols, gx, bs, len, cin, kernel, *pad_left);
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, alen, inner) = split_axis(self.shape(*x), *axis);
                let inv = T::one() / T::of(alen as f64);
                let gx = acc(&mut grads[x.0], outer * alen * inner);
                for o in 0..outer {
                    let src = &gy[o * inner..][..inner];
                    for a in 0..alen {
                        for (g, &d) in gx[(o * alen + a) * inner..][..inner].iter_mut().zip(src) {
                            *g = *g + d * inv;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let d = node.value.last_dim();
                let ga = acc(&mut grads[a.0], gy.len());
                for ((grow, drow), prow) in ga.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        grow[j] = grow[j] + prow[j] * (drow[j] - dot);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let gx = acc(&mut grads[x.0], outer * alen * inner);
                for o in 0..outer {
                    let dst = &mut gx[(o * alen + start) * inner..][..len * inner];
                    for (g, &d) in dst.iter_mut().zip(&gy[o * len * inner..][..len * inner]) {
                        *g = *g + d;
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = split_axis(self.shape(*a), *axis);
                let lb = self.shape(*b)[*axis];
                let lt = la + lb;
                if self.rg(*a) {
                    let ga = acc(&mut grads[a.0], outer * la * inner);
                    for o in 0..outer {
                        let src = &gy[o * lt * inner..][..la * inner];
                        ga[o * la * inner..][..la * inner].iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                if self.rg(*b) {
                    let gb = acc(&mut grads[b.0], outer * lb * inner);
                    for o in 0..outer {
                        let src = &gy[(o * lt + la) * inner..][..lb * inner];
                        gb[o * lb * inner..][..lb * inner].iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let coeff = gy[0] * T::of(2.0 / p.len() as f64);
                let gp = acc(&mut grads[pred.0], p.len());
                for ((g, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                    *g = *g + coeff * (pv - tv);
                }
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred).data();
                let inv_n = gy[0] / T::of(p.len() as f64);
                let hi = T::one() - *eps;
                let gp = acc(&mut grads[pred.0], p.len());
                for ((g, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                    // Clamped region has zero derivative.
                    if pv > *eps && pv < hi {
                        *g = *g + inv_n * ((T::one() - tv) / (T::one() - pv) - tv / pv);
                    }
                }
            }
            Op::Dot { x, w } => {
                let gx = acc(&mut grads[x.0], w.len());
                gx.iter_mut().zip(w).for_each(|(g, &wv)| *g = *g + gy[0] * wv);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Mask>,
        weights: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (bs, n, dq) = seq_dims(self.shape(q)).expect("checked");
        let (_, m, _) = seq_dims(self.shape(k)).expect("checked");
        let (_, _, dv) = seq_dims(self.shape(v)).expect("checked");
        let (hk, hv) = (dq / heads, dv / heads);
        let scale = T::one() / T::of(hk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (rq, rk, rv) = (self.rg(q), self.rg(k), self.rg(v));
        // Local buffers: q, k and v may alias the same node.
        let mut gq = if rq { vec![T::zero(); qd.len()] } else { Vec::new() };
        let mut gk = if rk { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut gv = if rv { vec![T::zero(); vd.len()] } else { Vec::new() };
        let mut dp = vec![T::zero(); n * m];
        for b in 0..bs {
            for h in 0..heads {
                let p = &weights[(b * heads + h) * n * m..][..n * m];
                let go = &gy[b * n * dv + h * hv..];
                if rv {
                    // dV_h += P^T dO_h
                    T::gemm(
                        m,
                        n,
                        hv,
                        T::one(),
                        p,
                        (1, m),
                        go,
                        (dv, 1),
                        T::one(),
                        &mut gv[b * m * dv + h * hv..],
                        (dv, 1),
                    );
                }
                if !(rq || rk) {
                    continue;
                }
                // dP = dO_h V_h^T
                T::gemm(
                    n,
                    hv,
                    m,
                    T::one(),
                    go,
                    (dv, 1),
                    &vd[b * m * dv + h * hv..],
                    (1, dv),
                    T::zero(),
                    &mut dp,
                    (m, 1),
                );
                for i in 0..n {
                    let prow = &p[i * m..(i + 1) * m];
                    let drow = &mut dp[i * m..(i + 1) * m];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        let allowed = mask.is_none_or(|mk| mk.is_allowed(i, j));
                        drow[j] = if allowed { prow[j] * (drow[j] - dot) } else { T::zero() };
                    }
                }
                if rq {
                    T::gemm(
                        n,
                        m,
                        hk,
                        scale,
                        &dp,
                        (m, 1),
                        &kd[b * m * dq + h * hk..],
                        (dq, 1),
                        T::one(),
                        &mut gq[b * n * dq + h * hk..],
                        (dq, 1),
                    );
                }
                if rk {
                    T::gemm(
                        m,
                        n,
                        hk,
                        scale,
                        &dp,
                        (1, m),
                        &qd[b * n * dq + h * hk..],
                        (dq, 1),
                        T::one(),
                        &mut gk[b * m * dq + h * hk..],
                        (dq, 1),
                    );
                }
            }
        }
        for (node, local) in [(q, gq), (k, gk), (v, gv)] {
            if !local.is_empty() {
                let dst = acc(&mut grads[node.0], local.len());
                dst.iter_mut().zip(&local).for_each(|(g, &d)| *g = *g + d);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// In-place max-subtracted softmax; disallowed entries become exactly zero.
pub(crate) fn softmax_row<T: Real>(row: &mut [T], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

fn im2col<T: Real>(x: &[T], cols: &mut [T], bs: usize, len: usize, cin: usize, kernel: usize, pad_left: usize) {
    let kc = kernel * cin;
    for b in 0..bs {
        for t in 0..len {
            let dst = &mut cols[(b * len + t) * kc..][..kc];
            for k in 0..kernel {
                let src_t = t as isize + k as isize - pad_left as isize;
                if src_t >= 0 && (src_t as usize) < len {
                    dst[k * cin..(k + 1) * cin].copy_from_slice(&x[(b * len + src_t as usize) * cin..][..cin]);
                }
            }
        }
    }
}

fn col2im<T: Real>(gcols: &[T], gx: &mut [T], bs: usize, len: usize, cin: usize, kernel: usize, pad_left: usize) {
    let kc = kernel * cin;
    for b in 0..bs {
        for t in 0..len {
            let src = &gcols[(b * len + t) * kc..][..kc];
            for k in 0..kernel {
                let src_t = t as isize + k as isize - pad_left as isize;
                if src_t >= 0 && (src_t as usize) < len {
                    let dst = &mut gx[(b * len + src_t as usize) * cin..][..cin];
                    for (g, &d) in dst.iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                        *g = *g + d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let err = Mask::new(2, 2, vec![true, false, false, false]).unwrap_err();
        assert_eq!(err, NnError::InvalidMask { row: 1 });
    }

    #[test]
    fn linear_backward_matches_hand_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 1], &[3.0, 4.0]));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn add_broadcasts_suffix() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2], &[10.0, 20.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.dot_const(y, &t(&[2, 2], &[1.0; 4])).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = g.slice(x, 1, 0, 2).unwrap();
        let b = g.slice(x, 1, 2, 3).unwrap();
        let y = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        let w = g.constant(Tensor::zeros(&[3, 3, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, w, b), Err(NnError::Shape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.input(t(&[2], &[1.0, 1.0]));
        let y = g.add(w, x).unwrap();
        let s = g.dot_const(y, &t(&[2], &[1.0, 1.0])).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
    }
}
