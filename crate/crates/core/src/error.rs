use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training laboratory.
///
/// The CLI maps these onto process exit codes: configuration and input
/// problems exit with 1, numeric failures with 2.
#[derive(Debug, Error)]
pub enum SpfmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SpfmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpfmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            SpfmError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = SpfmError> = std::result::Result<T, E>;
