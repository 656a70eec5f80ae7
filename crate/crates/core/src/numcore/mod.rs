//! Dense 64-bit tensors with a tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records every forward operation. Node creation order is a valid
//! topological order, so [`Tape::backward`] simply walks the nodes in reverse
//! and accumulates vector-Jacobian products.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport};
pub use ops::{conv2d_output_size, pool2d_output_size};
pub use tape::{Gradients, PoolKind, Tape, Var};
pub use tensor::{Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Invalid {
        op,
        detail: detail.into(),
    }
}
