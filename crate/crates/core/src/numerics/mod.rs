//! Dense tensors with reverse-mode differentiation and the AdamW optimizer.

pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::{sigmoid, softmax_rows, softplus};
pub use optim::{adamw_step, global_norm, AdamState, AdamWConfig};
pub use params::{uniform, Bound, LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{GradSink, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

