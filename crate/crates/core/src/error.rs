use thiserror::Error;

pub type Result<T> = std::result::Result<T, FodError>;

#[derive(Debug, Error)]
pub enum FodError {
    #[error("invalid schedule config: {0}")]
    InvalidSchedule(String),

    #[error("step index out of range: {index} (table has T = {steps})")]
    StepOutOfRange { index: usize, steps: usize },

    #[error("interval start {start} is after end {end}")]
    ReversedInterval { start: usize, end: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss is NaN at t = {t}")]
    NanLoss { t: usize },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("config error at line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FodError {
    /// True for errors caused by the user's configuration rather than a run.
    pub fn is_config(&self) -> bool {
        matches!(self, FodError::ConfigLine { .. } | FodError::Config(_) | FodError::InvalidSchedule(_))
    }
}
