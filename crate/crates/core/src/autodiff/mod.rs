//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! replays the recorded operations in reverse order and accumulates
//! gradients additively for every leaf marked `requires_grad`.
//!
//! Broadcasting is limited to scalar-with-tensor and equal shapes. Adding a
//! bias row to a matrix is an explicit operation ([`Tape::add_row`]).
//! `relu` uses the subgradient 0 at 0.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare, finite_difference, grad_check, gradient, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{cholesky, cholesky_inverse};
