use std::path::PathBuf;

/// Errors produced by the APPO pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported version {found:?} (expected {expected:?})")]
    Version {
        line: usize,
        found: String,
        expected: &'static str,
    },
    #[error("line {line}: invalid rollout group: {message}")]
    Invalid { line: usize, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("length error: prefix of {len} tokens exceeds max_response_len {max}")]
    Length { len: usize, max: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
