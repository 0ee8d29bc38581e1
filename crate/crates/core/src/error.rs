use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("retained count {k} out of range for layer of {len} entries")]
    KOutOfRange { k: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation errors are the ones a user fixes by editing input, as opposed to
    /// failures that happen while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::KOutOfRange { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
