//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation is recorded on a [`Tape`] together with whatever it needs
//! for the backward pass. [`Tape::backward`] walks the record in exact reverse
//! order and accumulates gradients additively. The tape is generic over the
//! scalar type so the same graph can be executed in `f32` for training and in
//! `f64` for finite-difference checks.

mod error;
mod gradcheck;
mod optim;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckError, GradCheckReport, TensorCheck};
pub use optim::{AdamW, Moments, OptimizerState};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
