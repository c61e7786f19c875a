use std::path::{Path, PathBuf};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("environment: {0}")]
    Environment(String),
    #[error("model: {0}")]
    Model(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Environment(_) | Error::Model(_) | Error::Tensor(_) => 1,
            Error::Vocab(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Dataset(_)
            | Error::Checkpoint(_)
            | Error::Eval(_) => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}
