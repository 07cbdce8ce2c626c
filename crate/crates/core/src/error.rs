use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// A residual or Jacobian row could not be evaluated (non-finite value or
    /// degenerate geometry such as coincident points).
    #[error("evaluation of measurement {index} failed: {reason}")]
    Evaluation { index: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A residual assigned to block-local set `E_i` touches a variable outside `I_i`.
    #[error("partition inconsistency: row {row} of block {block} has a nonzero in column {col} outside the block")]
    PartitionConsistency { block: usize, row: usize, col: usize },

    #[error("numerical failure in block {block}: {reason}")]
    Numerical { block: usize, reason: String },

    #[error("line search stalled: step size fell below {min_alpha:e} (F = {f:e}, |g| = {grad_norm:e})")]
    Stall { min_alpha: f64, f: f64, grad_norm: f64 },

    #[error("worker task for block {block} failed: {reason}")]
    Task { block: usize, reason: String },

    #[error("{0} is unavailable")]
    Unavailable(String),

    #[error("outer iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn eval(index: usize, reason: impl Into<String>) -> Self {
        Error::Evaluation {
            index,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::AtIteration { .. } => e,
            e => Error::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }
}
