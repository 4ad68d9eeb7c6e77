// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DaveError>;

#[derive(Debug, Error)]
pub enum DaveError {
    /// Operand shapes do not agree.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A container did not start with the expected magic or is otherwise malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A tensor is missing, duplicated or mis-shaped with respect to the model config.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid user-supplied parameter (sample count, step count, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A cache was passed to a layer it was not produced by.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Evaluation protocol violated (e.g. duplicate grid labels).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DaveError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DaveError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
