//! Minimal neural-network substrate: a reverse-mode tape over dense tensors,
//! the transformer and convolutional blocks built on it, losses, and Adam.

pub mod adam;
pub mod encoding;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use encoding::{positional_encoding, temporal_encoding, temporal_table};
pub use error::{NnError, Result};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{BatchStats, Graph, Mask, Var};
pub use layers::{
    Conv1dBlock, Ctx, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, ModelConfig, MultiHeadAttention,
};
pub use loss::{bce_loss, composite_loss, mse_loss, softmax, LossWeights, BCE_EPS};
pub use params::{Initializer, ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
