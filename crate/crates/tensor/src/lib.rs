//! Dense `f64` tensors with a record-on-forward reverse-mode tape.
//!
//! Values live on a [`Tape`]; operations append nodes and return [`Var`]
//! handles. Every forward op checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.
//!
//! Broadcasting is limited to scalar-vs-tensor in the elementwise ops, plus
//! the explicit [`Tape::add_bias`] op for trailing-axis biases.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, WorstCoordinate};
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
