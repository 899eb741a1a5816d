use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("sample {sample_id}: group id {group} out of range for {num_groups} declared groups")]
    GroupOutOfRange {
        sample_id: u64,
        group: usize,
        num_groups: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter layout does not match model configuration: {0}")]
    LayoutMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("weights outside the simplex: {0}")]
    Simplex(String),
    #[error("oracle scale exceeded: n = {0} (at most 6 supported)")]
    OracleScale(usize),
    #[error("non-finite objective at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
