use std::path::PathBuf;

use svedit_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const MISSING: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::UnknownKey(_) | CliError::BadValue { .. } => exit::USAGE,
            CliError::Data(_) => exit::DATA,
            CliError::Missing(_) => exit::MISSING,
            CliError::Core(e) => match e {
                CoreError::NumericFailure { .. } | CoreError::NonFinite(_) => exit::NUMERIC,
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING,
                CoreError::Checkpoint(_) => exit::MISSING,
                _ => exit::DATA,
            },
        }
    }

    pub fn bad(key: &str, msg: impl Into<String>) -> Self {
        CliError::BadValue {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
