//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row with no unmasked entry.
    #[error("softmax_masked: fully masked row {row}")]
    InvalidMask { row: usize },

    /// Lookup index outside a table.
    #[error("{table}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        table: &'static str,
        index: usize,
        size: usize,
    },

    /// An API contract was violated (non-scalar loss, head mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf produced by a numeric operation.
    #[error("non-finite value produced by {op}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    /// Malformed dataset, vocabulary or checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// A malformed line in a JSONL file.
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, context: None }
    }

    pub fn non_finite_in(op: &'static str, context: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            context: Some(context.into()),
        }
    }
}
