use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum SheafError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid network: {0}")]
    Construction(String),

    #[error("unsupported sheaf structure: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state diverged at step {step}")]
    Diverged { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SheafError> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> SheafError {
    SheafError::Dimension(msg.into())
}
