use dwmr_ndcore::NdError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dataset/config mismatch: {0}")]
    Mismatch(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Usage/config problems versus runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, CoreError::Config(_) | CoreError::Invalid(_))
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
