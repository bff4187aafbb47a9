use std::path::PathBuf;

use mvaema_core::CoreError;
use mvaema_teacher::TeacherError;
use mvaema_tensor::TensorError;
use thiserror::Error;

/// Process exit codes.
pub mod code {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const DATA: i32 = 5;
    pub const TRAINING: i32 = 6;
    pub const TEACHER: i32 = 7;
    pub const VALIDATION: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("dataset failed validation with {hard} hard violation(s)")]
    Validation { hard: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => code::USAGE,
            CliError::Config(_) => code::CONFIG,
            CliError::Io { .. } => code::IO,
            CliError::Data(_) | CliError::Json(_) => code::DATA,
            CliError::Validation { .. } => code::VALIDATION,
            CliError::Core(e) => core_code(e),
            CliError::Teacher(e) => match e {
                TeacherError::Io { .. } => code::IO,
                TeacherError::Config(_) | TeacherError::UnknownTemplate(_) | TeacherError::MissingKey(_) => code::CONFIG,
                TeacherError::Core(e) => core_code(e),
                TeacherError::Json(_) => code::DATA,
                _ => code::TEACHER,
            },
        }
    }
}

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Io { .. } => code::IO,
        CoreError::Config(_) | CoreError::UnknownVariant { .. } => code::CONFIG,
        CoreError::NonFiniteLoss { .. } | CoreError::Tensor(TensorError::NonFinite { .. }) => code::TRAINING,
        CoreError::Format(_)
        | CoreError::Channel(_)
        | CoreError::Dataset { .. }
        | CoreError::Json(_)
        | CoreError::Checkpoint(_)
        | CoreError::UnknownCategory(_)
        | CoreError::Frame(_) => code::DATA,
        CoreError::Contract { .. } | CoreError::Tensor(_) => code::INTERNAL,
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy() {
        let io = || std::io::Error::other("x");
        let cases: Vec<(CliError, i32)> = vec![
            (CliError::Usage("u".into()), 2),
            (CliError::Config("c".into()), 3),
            (CliError::io("p", io()), 4),
            (CoreError::Format("f".into()).into(), 5),
            (CoreError::Dataset { line: 1, msg: "m".into() }.into(), 5),
            (
                CoreError::NonFiniteLoss {
                    step: 0,
                    seed: 0,
                    detail: String::new(),
                }
                .into(),
                6,
            ),
            (CoreError::Tensor(TensorError::NonFinite { op: "matmul" }).into(), 6),
            (TeacherError::Auth { status: 401 }.into(), 7),
            (TeacherError::Refused.into(), 7),
            (TeacherError::MissingKey("K").into(), 3),
            (CliError::Validation { hard: 1 }, 8),
            (CoreError::Config("c".into()).into(), 3),
        ];
        for (e, want) in cases {
            assert_eq!(e.exit_code(), want, "{e}");
        }
    }
}
