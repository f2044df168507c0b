use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl AutogradError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AutogradError::Shape { op, detail: detail.into() }
    }
}
