use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FanError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A stage was started without the artifacts of the stages it depends on.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("training diverged at step {step} of stage {stage}: {detail}")]
    Divergence {
        stage: String,
        step: u64,
        detail: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FanError {
    pub fn validation(msg: impl Into<String>) -> Self {
        FanError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FanError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        FanError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FanError::Validation(_) | FanError::Lookup(_) | FanError::Protocol(_) => 2,
            FanError::Config(_) | FanError::Prerequisite(_) => 3,
            FanError::Divergence { .. } => 4,
            FanError::Format { .. } | FanError::Io { .. } => 5,
        }
    }
}
