use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum OdtError {
    #[error(transparent)]
    Protocol(#[from] odt_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("scenario {path}: {reason}")]
    Scenario { path: PathBuf, reason: String },
    #[error("need at least {min} samples per set, got {got}")]
    InsufficientSamples { got: usize, min: usize },
    #[error("sample sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = OdtError> = std::result::Result<T, E>;
