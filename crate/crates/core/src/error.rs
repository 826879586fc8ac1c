use thiserror::Error;

/// Errors raised by the simulator, the learners and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{users} users cannot be clustered onto {beams} beams with a per-beam cap of {cap}")]
    CapacityViolation { users: usize, beams: usize, cap: usize },

    #[error("effective channel is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("power budget infeasible: P_max {p_max} W does not exceed fixed consumption {fixed} W")]
    BudgetInfeasible { p_max: f64, fixed: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
