//! Error types shared across the crate.

use thiserror::Error;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum CdlmError {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration produced impossible extents (e.g. non-positive conv output).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Value outside the mathematical domain of an operation (log/sqrt of <= 0, etc.).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A forward operation produced NaN or Inf; training aborts immediately.
    #[error("non-finite value produced by {op} (index {index})")]
    NonFinite { op: &'static str, index: usize },

    /// API misuse (non-scalar loss, missing labels, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed external file (IDX, checkpoint, config).
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Model used before its parameters were initialized/loaded.
    #[error("state error: {0}")]
    State(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CdlmError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CdlmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CdlmError>;
