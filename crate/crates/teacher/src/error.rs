use std::path::PathBuf;

use mvaema_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("unknown prompt template {0} (expected 1-10)")]
    UnknownTemplate(u8),
    #[error("teacher rejected credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("teacher unavailable after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("image of {bytes} bytes exceeds the {limit} byte limit")]
    OversizeImage { bytes: usize, limit: usize },
    #[error("no canned response at {}", path.display())]
    MockMiss { path: PathBuf },
    #[error("network access refused")]
    Refused,
    #[error("malformed teacher response: {0}")]
    Response(String),
    #[error("no question-answer pairs found in response: {raw:?}")]
    Parse { raw: String },
    #[error("missing API key: set {0}")]
    MissingKey(&'static str),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TeacherError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TeacherError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TeacherError> = std::result::Result<T, E>;
