//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is single-threaded; parallel work uses one tape per sample.
//! Leaves are copied onto the tape, so parameter tensors can be updated
//! between steps without invalidating anything recorded.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{central_difference, grad_check};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
