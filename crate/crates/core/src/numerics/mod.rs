//! Tensor arithmetic, reverse-mode differentiation and optimization.

pub(crate) mod gemm;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, global_norm, AdamConfig, AdamState};
pub use tape::{BatchStats, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;
