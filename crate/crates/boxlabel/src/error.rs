use std::path::{Path, PathBuf};

use boxlabel_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: CoreError,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Core {
                source: CoreError::InvalidConfig(_),
                ..
            } => EXIT_USAGE,
            AppError::Internal(_) => EXIT_INTERNAL,
            _ => EXIT_DATA,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// Attaches a context string (usually a file or image name) to core errors.
pub trait CoreContext<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T>;
}

impl<T> CoreContext<T> for Result<T, CoreError> {
    fn context(self, what: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| AppError::Core {
            context: what.to_string(),
            source,
        })
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
