use thiserror::Error;

/// Errors raised by tensor construction, tape operations and checkpoint I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    Shape { op: &'static str, expected: String, got: Vec<usize> },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite value at coordinate {coordinate} ({context})")]
    NonFinite { coordinate: usize, context: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::Shape { op, expected: expected.into(), got: got.to_vec() }
}
