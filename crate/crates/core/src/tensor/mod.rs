//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod gradcheck;
pub mod kernels;
mod tape;
mod value;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_params};
pub use tape::{sigmoid, Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use value::{broadcast_shape, Tensor};
