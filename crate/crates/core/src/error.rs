use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("corrupt file {path}: {msg}")]
    Corruption { path: PathBuf, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Json(_) | Error::Domain(_) => 2,
            Error::Numeric(_) | Error::Training { .. } => 4,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Corruption { .. }
            | Error::Validation(_)
            | Error::Sampling(_)
            | Error::Checkpoint(_)
            | Error::Csv(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
