//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, training, and file handling.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix/vector dimensions do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed input data, with a 1-based row and column location.
    #[error("data format error at row {row}, column {col}: {msg}")]
    DataFormat { row: usize, col: usize, msg: String },

    /// A documented invariant was violated at runtime.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// An audit was requested on a dataset without hidden ground truth.
    #[error("audit unavailable: {0}")]
    AuditUnavailable(String),

    /// A non-finite value appeared where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::AuditUnavailable(_) => 2,
            Error::DataFormat { .. } | Error::Io(_) => 3,
            Error::Shape(_) | Error::Invariant(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
