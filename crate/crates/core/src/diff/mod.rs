//! Dense `f64` tensors and a single-use reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Model parameters and
//! attack inputs are leaves; [`Tape::backward`] fills in the gradient slot of
//! each leaf that asked for one. Ops check their outputs and fail with
//! [`Error::NonFinite`](crate::Error::NonFinite) rather than propagate NaN.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

pub(crate) use kernels::dot;
