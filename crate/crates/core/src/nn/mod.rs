//! Minimal deterministic tensor engine: dense f64 tensors, a tape-based
//! computation graph with reverse-mode differentiation, the layers used by
//! the outfit encoder, and Adam.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{ConvGeometry, Gradients, Graph, SeqLayout, Var, MASKED_LOGIT};
pub use layers::{EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerEncoder};
pub use optim::{clip_global_norm, global_norm, halving_schedule, Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
