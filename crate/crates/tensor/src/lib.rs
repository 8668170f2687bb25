//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Images are stored channel-last (`[N, H, W, C]`), matching the on-disk
//! dataset layout. Reductions run in a fixed order, so identical inputs give
//! bit-identical results.

mod autograd;
mod dtype;
mod error;
pub mod gradcheck;
mod kernels;
pub mod nn;
mod ops;
mod optim;
mod tensor;

pub use autograd::{grad, is_grad_enabled, no_grad, GradModeGuard};
pub use dtype::{DType, Element, Storage};
pub use error::{Result, TensorError};
pub use kernels::PatchGeometry;
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::Tensor;
