//! Stateless entry points for single (unbatched) inputs. They run the same
//! kernels as the tape, on a throwaway graph.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Mask};
use crate::layers::{Conv1dBlock, FeedForward, MultiHeadAttention};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// `softmax(Q K^T / sqrt(d_k)) V` for `Q: n x d_k`, `K: m x d_k`, `V: m x d_v`.
pub fn scaled_dot_product_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    attention_with_weights(q, k, v, mask).map(|(out, _)| out)
}

/// Attention output together with the `n x m` weight matrix.
pub fn attention_with_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.shape().len() != 2 {
            return Err(NnError::Shape(format!("{name} must be a matrix, got {:?}", t.shape())));
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 1, mask)?;
    let weights = g.attention_weights(out).expect("attention node").to_vec();
    let (n, m) = (q.shape()[0], k.shape()[0]);
    Ok((g.value(out).clone(), Tensor::from_parts(vec![n, m], weights)))
}

pub fn multi_head_attention<T: Real>(
    params: &MultiHeadAttention,
    store: &ParamStore<T>,
    queries: &Tensor<T>,
    context: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (q, c) = (g.constant(queries.clone()), g.constant(context.clone()));
    let out = params.forward(&mut g, store, q, c, mask)?;
    Ok(g.value(out).clone())
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let out = g.layer_norm(xv, gv, bv, T::of(crate::layers::LayerNorm::EPS))?;
    Ok(g.value(out).clone())
}

pub fn feed_forward<T: Real>(params: &FeedForward, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = params.forward(&mut g, store, xv)?;
    Ok(g.value(out).clone())
}

/// Inference-mode conv block on a single `length x channels` sequence.
pub fn conv1d_block<T: Real>(params: &Conv1dBlock, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, _) = params.forward(&mut g, store, xv, false)?;
    Ok(g.value(out).clone())
}

/// Per-channel mean over time of a `length x channels` matrix.
pub fn global_average_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(NnError::Shape(format!("global average pool expects length x channels, got {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = g.mean_axis(xv, 0)?;
    Ok(g.value(out).clone())
}
