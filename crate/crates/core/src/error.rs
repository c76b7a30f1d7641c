use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Divergence,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {symbol:?} at position {} (index {index})", index + 1)]
    UnknownSymbol { index: usize, symbol: char },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{path}:{line}: sequence length {got} differs from {expected} on earlier rows")]
    RaggedLength { path: PathBuf, line: usize, expected: usize, got: usize },

    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("difficulty filter kept no records ({0}); widen the percentile range or lower the gap")]
    EmptyFilter(String),

    #[error("invalid fitness range: y_min={y_min} must be finite and below y_max={y_max}")]
    InvalidRange { y_min: f64, y_max: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("unsupported checkpoint: {0}")]
    Unsupported(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::Divergence { .. } => ErrorKind::Divergence,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
