use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("duplicate input row rejected")]
    DuplicateInput,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("evaluator returned a non-finite value at sample {index}")]
    NonFiniteSample { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("proposal cap of {cap} exhausted with {found} of {wanted} points found")]
    ProposalCapExhausted { cap: usize, found: usize, wanted: usize },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
