//! Error taxonomy shared across the crate, with a stable mapping to process
//! exit codes: configuration/shape problems exit 2, numerical faults exit 3,
//! I/O and ingestion problems exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or operation preconditions (exit 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape contract violation, naming what disagreed (exit 2).
    #[error("shape error: {0}")]
    Shape(String),

    /// Numerical fault: NaN/Inf in training, degenerate statistics,
    /// failed matrix decompositions (exit 3).
    #[error("numerical fault: {0}")]
    Numerical(String),

    /// Filesystem / serialization problems (exit 4).
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Dataset ingestion problems, naming the offending file (exit 4).
    #[error("ingestion error: {0}")]
    Ingest(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn ingest(msg: impl Into<String>) -> Self {
        Error::Ingest(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io(_) | Error::Ingest(_) => 4,
        }
    }
}
