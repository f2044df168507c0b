use autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CondsepError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, CondsepError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CondsepError {
    CondsepError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> CondsepError {
    CondsepError::Shape(msg.into())
}
