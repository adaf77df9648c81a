//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A run configuration is internally inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A required external tool or resource is unavailable.
    #[error("environment error: {0}")]
    Environment(String),

    /// Filesystem or serialization failure tied to a specific path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file is malformed or incompatible with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 runtime, 3 environment.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Environment(_) => 3,
            _ => 2,
        }
    }
}
