use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("prompt {prompt} response {response} is outside the task domain")]
    OutOfRange { prompt: usize, response: usize },

    #[error(
        "support violation on prompt {prompt}: response {response} has mass under the covered \
         distribution but zero mass under the covering one"
    )]
    SupportViolation { prompt: usize, response: usize },

    #[error("group of size {0} is too small; at least 2 responses are required")]
    GroupTooSmall(usize),

    #[error("responses {0} and {1} have tied rewards; no preference can be derived")]
    RewardTie(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("malformed document: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
