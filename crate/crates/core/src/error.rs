use thiserror::Error;

#[derive(Debug, Error)]
pub enum SltError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power iteration did not converge after {iterations} iterations (best estimate {estimate})")]
    ConvergenceFailure { estimate: f64, iterations: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingFailure { epoch: usize, curve: Vec<crate::train::EpochLoss> },

    #[error("edge-popup search failed at step {step}: {reason}")]
    SearchFailure { step: usize, reason: String },

    #[error("exponential fit unavailable: {0}")]
    FitUnavailable(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SltError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> SltError {
    SltError::InvalidArgument(msg.into())
}
