use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("audio contains no samples")]
    EmptyAudio,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("time step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("spectrogram is already log-compressed")]
    AlreadyLog,

    #[error("operation requires a linear (non-log) spectrogram")]
    LogInput,

    #[error("trace does not match parameters: {0}")]
    StaleTrace(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
