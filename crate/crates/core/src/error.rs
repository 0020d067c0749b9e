//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entries in {context}")]
    NonFinite { context: &'static str },

    #[error("{context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("orthonormality correction loop did not settle after {iterations} iterations")]
    CorrectionLoopStalled { iterations: usize },

    #[error("negative snapshot weight {value} at column {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("all snapshot weights are zero")]
    AllWeightsZero,

    #[error("parameter point duplicates stored point {index} (2-norm gap {gap:.3e})")]
    DuplicatePoint { index: usize, gap: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("requested basis dimension {requested} exceeds available rank {available}")]
    RankExceeded { requested: usize, available: usize },

    #[error("no snapshots with parametric derivative data")]
    NoDerivativeData,

    #[error("empty point list")]
    EmptyPointList,

    #[error("cutoff fraction c = {0} outside (0, 1]")]
    InvalidCutoffFraction(f64),

    #[error("time weights need at least two steps, got {0}")]
    TooFewTimeSteps(usize),

    #[error("parameter {index} = {value} outside bounds [{lo}, {hi}]")]
    ParameterOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("reduced operator is singular (degenerate basis)")]
    DegenerateBasis,

    #[error("linear solve failed in {context}")]
    SolveFailed { context: &'static str },

    #[error("relative error undefined: reference trajectory has zero norm")]
    ZeroReferenceNorm,

    #[error("optimizer step failure: {reason}")]
    StepFailure { reason: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
