use thiserror::Error;

/// Errors produced by the estimation, simulation and experiment layers.
#[derive(Debug, Error)]
pub enum OrlError {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("schedule infeasible: {0}")]
    Schedule(String),

    #[error("all {0} workers failed")]
    AllWorkersFailed(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed dataset container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OrlError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> OrlError {
    OrlError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(OrlError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
