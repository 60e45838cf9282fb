//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records every primitive as a node; [`Var`] is a copyable handle
//! into the tape. Calling [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every leaf on the path to the loss. All compute
//! is `f64` — detection-scale models are small enough that the extra
//! precision is worth more than a fast path.
//!
//! Every primitive checks its output for non-finite values and fails fast;
//! a NaN that survives one op poisons every downstream gradient and is far
//! harder to localise later.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use params::ParameterSet;
pub use tape::{Gradients, ParamVars, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::bce_scalar;

use thiserror::Error;

/// Errors raised by tape construction, the backward pass, or the optimizer.
#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("variables belong to different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar loss, got a tensor of {len} elements")]
    NonScalarLoss { len: usize },

    #[error("gradient missing for parameter {name:?}")]
    MissingGradient { name: String },

    #[error("optimizer state does not match parameter {name:?}")]
    OptimizerShapeMismatch { name: String },

    #[error("{what} must not be empty")]
    Empty { what: &'static str },
}
