use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the occupancy-field library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} outside the domain {domain}")]
    OutOfDomain { value: f64, domain: &'static str },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("no valid pixels: {0}")]
    NoValidPixels(&'static str),

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { format, detail: detail.into() }
    }

    pub(crate) fn mismatch(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
    }

    /// True for errors caused by bad user input (configs, arguments, files)
    /// rather than failures during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::OutOfDomain { .. }
                | Error::DimensionMismatch { .. }
                | Error::Config(_)
                | Error::Format { .. }
                | Error::Json { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
