//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GisError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape { what: String, expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dataset error at {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch indices {indices:?})")]
    NonFinite { step: u64, indices: Vec<usize> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GisError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GisError::Io { path: path.into(), source }
    }

    /// Exit code policy for the CLI: validation failures are distinguishable
    /// from other errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            GisError::Validation(_) | GisError::Dataset { .. } => 2,
            _ => 1,
        }
    }
}
