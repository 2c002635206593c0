//! Dense tensors, forward kernels, reverse-mode autodiff and Adam.

mod adam;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use ops::{layer_norm, matmul, scaled_dot_attention, softmax};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
