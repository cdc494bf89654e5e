use thiserror::Error;

pub type Result<T> = std::result::Result<T, HirError>;

#[derive(Debug, Error)]
pub enum HirError {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value (maps to CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// A diagnostic cannot be computed for the given inputs.
    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    /// Non-finite loss or gradient during training.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Malformed checkpoint, CSV or manifest contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HirError {
    pub fn is_config(&self) -> bool {
        matches!(self, HirError::Config(_) | HirError::Json(_))
    }
}
