//! Deterministic reverse-mode differentiation over dense `f64` tensors.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::Sgd;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{zero_grads, Tensor};
