use thiserror::Error;

use crate::DType;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid parameter, {detail}")]
    InvalidParameter { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("dtype mismatch: expected {expected}, got {got}")]
    DTypeMismatch { expected: DType, got: DType },
    #[error("graph state: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidParameter {
            op,
            detail: detail.into(),
        }
    }
}
