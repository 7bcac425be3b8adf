//! Synthetic data, training, evaluation, exports and verification suites.

pub mod config;
pub mod eval;
pub mod export;
pub mod scene;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use eval::{evaluate, EvalReport};
pub use scene::{generate_scene, SceneMode, SceneParams, SyntheticScene};
pub use train::{train, LogRecord, TrainOutcome};
pub use verify::{run_suite, Suite, VerifyReport};

use crate::matching::{CriterionError, MatchingError};
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { iteration: usize, component: String },
    #[error("{0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<CriterionError> for HarnessError {
    fn from(e: CriterionError) -> Self {
        match e {
            CriterionError::Matching(m) => Self::Matching(m),
            CriterionError::Numerics(n) => Self::Numerics(n),
        }
    }
}

impl HarnessError {
    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::InvalidRequest(_) | Self::Model(ModelError::Config(_) | ModelError::Checkpoint(_))
        )
    }
}
