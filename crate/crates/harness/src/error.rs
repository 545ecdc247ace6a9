use std::path::PathBuf;

use repsgg_core::CoreError;
use repsgg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
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
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("non-finite {term} loss at iteration {iter}")]
    NonFinite { term: &'static str, iter: usize },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        HarnessError::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
