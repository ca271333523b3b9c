//! Shared error type for the whole crate.
//!
//! Variants are grouped by the failure class they represent so the CLI can
//! map them onto stable exit codes (config = 2, data = 3, numeric = 4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape is unusable for the requested operation.
    #[error("invalid shape in {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Bad configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / file-format problems.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (NaN/Inf, degenerate input) that aborts a run.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// An operation was called before its required state was established.
    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
