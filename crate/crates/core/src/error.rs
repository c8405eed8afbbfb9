//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} row {index} is not a distribution (sum = {sum})")]
    InvalidDistribution {
        what: &'static str,
        index: usize,
        sum: f64,
    },

    #[error("{what} = {value} outside its valid range")]
    InvalidValue { what: &'static str, value: f64 },

    #[error("index {index} out of range for {what} (size {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("linear system for {0} is singular")]
    SingularSystem(&'static str),

    #[error("linear solve residual {residual} exceeds {limit} for {what}")]
    SolveResidual {
        what: &'static str,
        residual: f64,
        limit: f64,
    },

    #[error("batch is empty")]
    EmptyBatch,

    #[error(
        "confidence violates the per-state equality constraint at state {state} \
         (residual {residual}, tolerance {tolerance})"
    )]
    ConfidenceInfeasible {
        state: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error(
        "conflicting confidence values {first} and {second} for state-action ({state}, {action})"
    )]
    ConflictingDuplicate {
        state: usize,
        action: usize,
        first: f64,
        second: f64,
    },

    #[error(
        "importance ratio undefined: behavior probability is zero at ({state}, {action}) \
         but lambda * (rho - beta) is nonzero"
    )]
    UndefinedImportanceRatio { state: usize, action: usize },

    #[error("KL divergence undefined at ({state}, {action}): support mismatch")]
    UndefinedKl { state: usize, action: usize },

    #[error("temperature {tau} at state {state} must be positive")]
    NonPositiveTemperature { state: usize, tau: f64 },

    #[error("theta is singular under the closed-form method; set qp_ridge > 0")]
    SingularTheta,

    #[error("{what} did not converge within {sweeps} sweeps (residual {residual})")]
    NotConverged {
        what: &'static str,
        sweeps: usize,
        residual: f64,
    },

    #[error("no confidence labels available")]
    EmptyLabelSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch file error at line {line}: {msg}")]
    BatchParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
