//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each operation together with the handles of its
//! inputs; [`Tape::backward`] walks the record in reverse and accumulates
//! parameter gradients into a [`ParamStore`]. Besides the dense operations
//! the tape knows the sparse segment primitives attention layers need:
//! row gathers over an edge list, per-segment softmax, and per-segment
//! weighted sums.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`AutodiffError::NonFinite`] instead of letting it propagate.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradMismatch, REL_ERROR_FLOOR};
pub use matrix::Matrix;
pub use params::{Param, ParamStore};
pub use tape::{BackwardFn, Gradients, Index, ParamVars, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("backward needs a scalar, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

#[cfg(test)]
mod tests;
