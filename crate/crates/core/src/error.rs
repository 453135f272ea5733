//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset ingestion or layout problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file is malformed or inconsistent with the network.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Misuse of the autodiff graph (non-scalar loss, double backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
