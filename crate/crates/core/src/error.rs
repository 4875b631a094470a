use std::path::PathBuf;

use motionauth_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{file}: row {row}: {message}")]
    File { file: PathBuf, row: usize, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(NnError),
}

impl From<NnError> for CoreError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite(m) => CoreError::Numeric(m),
            NnError::Config(m) => CoreError::Config(m),
            NnError::Shape(m) => CoreError::Shape(m),
            other => CoreError::Nn(other),
        }
    }
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
