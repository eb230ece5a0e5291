//! Crate-wide error type, grouped by the failure classes the command-line
//! tool maps to exit codes: configuration (1), data (2), numerical abort (3).

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operator or model wiring received tensors whose shapes do not agree.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A value-level precondition failed (bad stride, empty set, range error).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration file or invocation is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure while reading or writing artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A loss term, gradient, or tensor value stopped being finite.
    #[error("numerical abort: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn data_at(path: &Path, msg: impl std::fmt::Display) -> Self {
        Error::Data(format!("{}: {msg}", path.display()))
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }

    /// Process exit code the CLI reports for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::NonFinite(_) => 3,
        }
    }
}
