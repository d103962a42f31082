//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("degenerate probability field: sum of probabilities is zero")]
    DegenerateProbabilityField,

    #[error("empty ROI: no pixel survives thresholding")]
    EmptyRoi,

    #[error("infeasible sampling target {target} on a grid with {available} candidate locations")]
    InfeasibleTarget { target: usize, available: usize },

    #[error("budget constraint violated: {0}")]
    Budget(String),

    #[error("bad magic bytes in tensor file (expected \"NXT1\")")]
    BadMagic,

    #[error("unsupported dtype code {0} in tensor file")]
    BadDtype(u32),

    #[error("truncated payload at byte offset {offset}")]
    TruncatedPayload { offset: u64 },

    #[error("malformed PGM: {0}")]
    BadPgm(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("gradient check probe produced a non-finite value at coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
