use std::path::PathBuf;

use mvaema_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image format: {0}")]
    Format(String),
    #[error("image channels: {0}")]
    Channel(String),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("frame error: {0}")]
    Frame(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown {kind} `{value}`")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("non-finite loss at step {step} (seed {seed}): {detail}")]
    NonFiniteLoss { step: u64, seed: u64, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
