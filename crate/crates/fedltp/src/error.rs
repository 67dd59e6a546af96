//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or vector had the wrong dimensions for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A binary dataset file did not match its format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A configuration file could not be parsed.
    #[error("config error at {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    /// Command-line usage error.
    #[error("usage: {0}")]
    Usage(String),

    /// Iterative pruning could not remove any further parameters.
    #[error("cannot prune further: {0}")]
    PruneExhausted(String),

    /// I/O error, annotated with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: one category per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config { .. } => 3,
            Error::Format { .. } | Error::Io { .. } | Error::Serde(_) => 4,
            Error::Shape(_) | Error::InvalidInput(_) | Error::PruneExhausted(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
