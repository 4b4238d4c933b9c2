use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("classes shared between splits: {0:?}")]
    SplitViolation(Vec<String>),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerically degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at episode {episode} (episode seed {seed:#x})")]
    NonFinite { episode: usize, seed: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
