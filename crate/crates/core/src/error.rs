use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FolError>;

#[derive(Debug, Error)]
pub enum FolError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor load error at byte offset {offset}: {reason}")]
    Load { offset: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl FolError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FolError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        FolError::Dimension(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        FolError::Degenerate(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FolError::InvalidArgument(msg.into())
    }
}
