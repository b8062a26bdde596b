//! Dense `f64` tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod nn;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use nn::BatchShape;
pub use tensor::{Array, Tensor};
