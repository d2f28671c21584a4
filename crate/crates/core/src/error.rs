use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

#[derive(Debug, Error)]
pub enum NcaeError {
    /// Shapes or dimensions disagree with the configured model.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An input file is malformed.
    #[error("ingestion error in {path}: {field}: {reason}")]
    Ingestion {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {last:?}")]
    NonFinite {
        step: usize,
        last: Box<LossBreakdown>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NcaeError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> NcaeError {
    NcaeError::Config(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> NcaeError {
    NcaeError::Argument(msg.into())
}
