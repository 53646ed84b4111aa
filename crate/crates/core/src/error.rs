use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SitarError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, SitarError>;

impl SitarError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SitarError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        SitarError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SitarError::Argument(_) | SitarError::Config(_) => 2,
            SitarError::Data(_)
            | SitarError::Io { .. }
            | SitarError::Image { .. }
            | SitarError::Format { .. } => 3,
            SitarError::Numeric(_) => 4,
        }
    }
}
