//! Crate-wide error type.

use thiserror::Error;

use crate::distill::DistillTrace;

pub type Result<T> = std::result::Result<T, CovError>;

#[derive(Debug, Error)]
pub enum CovError {
    /// Incompatible matrix or batch dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside the operation's mathematical domain (zero-norm row,
    /// non-positive temperature, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Too few samples for the statistic to exist (e.g. covariance of one row).
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// A numeric procedure failed (non-convergence, non-finite intermediate).
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training failure at step {step}: {detail}")]
    Training { step: u64, detail: String },

    /// A caller-side precondition does not hold (missing snapshot, truncated
    /// inner solution where exactness is required, ...).
    #[error("precondition violated in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or corrupted file (bad magic, version, checksum, truncation).
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    /// The distillation loop hit a non-finite loss; the trace collected up to
    /// the failing step is preserved so callers can flush it.
    #[error("distillation aborted at step {step}: {detail}")]
    DistillAborted {
        step: u64,
        detail: String,
        trace: Box<DistillTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CovError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CovError::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        CovError::Domain { op, detail: detail.into() }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        CovError::Degenerate { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        CovError::Numeric { op, detail: detail.into() }
    }

    pub fn precondition(op: &'static str, detail: impl Into<String>) -> Self {
        CovError::Precondition { op, detail: detail.into() }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CovError::Format { path: path.into(), detail: detail.into() }
    }
}
