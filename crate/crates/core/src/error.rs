use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two parameter sets do not share a manifest.
    #[error("incompatible parameter sets: {0}")]
    Incompatible(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("failed to ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("non-finite {what} loss in round {round}, client {client}, batch {batch}")]
    Training {
        what: &'static str,
        round: usize,
        client: usize,
        batch: usize,
    },

    /// A parameter set other than the shared extractor tried to cross the
    /// client/server boundary.
    #[error("privacy boundary violation: {0}")]
    Boundary(String),

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
