//! Reverse-mode automatic differentiation, optimizer and gradient checking.

pub mod gradcheck;
pub mod optim;
mod tape;
mod tensor;

pub use tape::{Attrs, Gradients, OpName, Tape, Var};
pub use tensor::Tensor;
