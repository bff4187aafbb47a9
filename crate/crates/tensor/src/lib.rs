//! Small deterministic tensor library with tape-based reverse-mode
//! automatic differentiation and the Adam optimizer.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Tape`] through
//! [`Var`] handles. Calling [`Tape::backward`] on a scalar produces
//! [`Gradients`], which can be accumulated into the `grad` buffers of a
//! [`ParamStore`]. Gradients accumulate until [`ParamStore::zero_grad`] is
//! called, so several losses can be back-propagated into the same step.
//!
//! Everything runs single-threaded and in a fixed order, so identical inputs
//! produce bitwise-identical outputs and gradients.

mod adam;
mod error;
pub mod gradcheck;
pub mod init;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use params::{BoundParams, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
