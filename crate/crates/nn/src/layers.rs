//! Parameterized building blocks. Each layer owns only [`ParamId`]s; values
//! live in a [`ParamStore`] so the optimizer and checkpoints see one flat list.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{BatchStats, Graph, Mask, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Transformer shape hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_hidden: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_q", self.d_q),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_hidden", self.d_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(NnError::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.d_q != self.d_k {
            return Err(NnError::Config(format!("d_q ({}) must equal d_k ({})", self.d_q, self.d_k)));
        }
        if self.n_head * self.d_v > 4 * self.d_model {
            return Err(NnError::Config(format!(
                "n_head * d_v = {} is out of proportion to d_model = {}",
                self.n_head * self.d_v,
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Per-forward-pass switches.
pub struct Ctx<'a> {
    pub training: bool,
    pub dropout_rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx { training: false, dropout_rate: 0.0, rng: None }
    }

    pub fn train_no_dropout() -> Ctx<'static> {
        Ctx { training: true, dropout_rate: 0.0, rng: None }
    }

    /// Inverted dropout; identity unless training with a positive rate.
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if !self.training || self.dropout_rate <= 0.0 {
            return Ok(x);
        }
        let rng =
            self.rng.as_deref_mut().ok_or_else(|| NnError::Config("dropout needs an rng in training mode".into()))?;
        let keep = 1.0 - self.dropout_rate;
        let scale = T::of(1.0 / keep);
        let mask = (0..g.value(x).len()).map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() }).collect();
        g.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.fan_in_uniform(&[d_in, d_out], d_in));
        let b = bias.then(|| store.add(format!("{name}.bias"), init.fan_in_uniform(&[d_out], d_in)));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        LayerNorm { gamma, beta, eps: Self::EPS }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::of(self.eps))
    }
}

/// Position-wise `dense -> ReLU -> dense`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_model: usize,
        d_hidden: usize,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, init, &format!("{name}.inner"), d_model, d_hidden, true),
            outer: Linear::new(store, init, &format!("{name}.outer"), d_hidden, d_model, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Multi-head attention with per-head projections packed side by side in
/// one matrix per role (head `h` owns columns `h*d_k..(h+1)*d_k`).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_head: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.n_head);
        MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.query"), d, h * cfg.d_q, true),
            key: Linear::new(store, init, &format!("{name}.key"), d, h * cfg.d_k, true),
            value: Linear::new(store, init, &format!("{name}.value"), d, h * cfg.d_v, true),
            output: Linear::new(store, init, &format!("{name}.output"), h * cfg.d_v, d, true),
            n_head: h,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        if self.query.d_out != self.key.d_out
            || !self.value.d_out.is_multiple_of(self.n_head)
            || !self.query.d_out.is_multiple_of(self.n_head)
        {
            return Err(NnError::Config("multi-head attention: head dimensions do not agree".into()));
        }
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let heads = g.attention(q, k, v, self.n_head, mask)?;
        self.output.forward(g, store, heads)
    }
}

/// Post-norm encoder layer: `x = LN(x + MHA(x)); x = LN(x + FF(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub feed_forward: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        EncoderLayer {
            attention: MultiHeadAttention::new(store, init, &format!("{name}.attention"), cfg),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            feed_forward: FeedForward::new(store, init, &format!("{name}.ff"), cfg.d_model, cfg.d_hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let a = self.attention.forward(g, store, x, x, None)?;
        let a = ctx.dropout(g, a)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.feed_forward.forward(g, store, x)?;
        let f = ctx.dropout(g, f)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// Post-norm decoder layer with masked self-attention and masked
/// cross-attention over the encoder output.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub feed_forward: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        DecoderLayer {
            self_attention: MultiHeadAttention::new(store, init, &format!("{name}.self_attention"), cfg),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            cross_attention: MultiHeadAttention::new(store, init, &format!("{name}.cross_attention"), cfg),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            feed_forward: FeedForward::new(store, init, &format!("{name}.ff"), cfg.d_model, cfg.d_hidden),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.d_model),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        self_mask: &Mask,
        cross_mask: &Mask,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let a = self.self_attention.forward(g, store, x, x, Some(self_mask))?;
        let a = ctx.dropout(g, a)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let c = self.cross_attention.forward(g, store, x, memory, Some(cross_mask))?;
        let c = ctx.dropout(g, c)?;
        let x = g.add(x, c)?;
        let x = self.norm2.forward(g, store, x)?;
        let f = self.feed_forward.forward(g, store, x)?;
        let f = ctx.dropout(g, f)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, store, x)
    }
}

/// `conv1d ("same" padding) -> batch norm -> ReLU`.
///
/// Running statistics are buffers in the store, updated with
/// `running = (1 - momentum) * running + momentum * batch` (unbiased batch
/// variance, as in the common frameworks).
#[derive(Clone, Debug)]
pub struct Conv1dBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub kernel: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl Conv1dBlock {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        filters: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel == 0 || c_in == 0 || filters == 0 {
            return Err(NnError::Config(format!("conv block {name}: kernel, channels and filters must be positive")));
        }
        let fan_in = kernel * c_in;
        Ok(Conv1dBlock {
            weight: store.add(format!("{name}.weight"), init.fan_in_uniform(&[kernel, c_in, filters], fan_in)),
            bias: store.add(format!("{name}.bias"), init.fan_in_uniform(&[filters], fan_in)),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[filters], T::one())),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[filters])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[filters])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[filters], T::one())),
            kernel,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    /// Returns the block output and, in training mode, the batch statistics
    /// to fold into the running averages with [`Conv1dBlock::update_running`].
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv1d(x, w, b)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (n, stats) = if training {
            let n = g.batch_norm(y, gamma, beta, T::of(self.eps))?;
            let stats = g.batch_stats(n).cloned();
            (n, stats)
        } else {
            let mean = store.get(self.running_mean).data().to_vec();
            let var = store.get(self.running_var).data().to_vec();
            (g.batch_norm_inference(y, gamma, beta, &mean, &var, T::of(self.eps))?, None)
        };
        Ok((g.relu(n), stats))
    }

    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>, count: usize) {
        let m = T::of(self.momentum);
        let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
        let rm = store.get_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = store.get_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}
