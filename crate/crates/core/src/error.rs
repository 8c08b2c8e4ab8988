use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PoeError>;

#[derive(Debug, Error)]
pub enum PoeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("library digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("artifact format error: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("tape already consumed")]
    TapeConsumed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PoeError {
    /// Errors caused by bad caller input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, PoeError::Io(_) | PoeError::NonFinite(_))
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PoeError::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PoeError::Invalid(msg.into()))
}
