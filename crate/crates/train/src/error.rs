use thiserror::Error;

use mvcorr_core::Error as CoreError;
use mvcorr_nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("no unlabeled view pair reaches the {min_overlap} overlap threshold")]
    NoEligiblePairs { min_overlap: f64 },
    #[error("labeled set is empty")]
    EmptyLabeled,
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

impl TrainError {
    /// Process exit status: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) | TrainError::UnknownKey { .. } => 2,
            TrainError::Core(CoreError::Config(_)) => 2,
            TrainError::Nn(NnError::Config(_)) => 2,
            TrainError::NonFinite { .. } | TrainError::Nn(NnError::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}
