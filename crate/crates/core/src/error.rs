//! Crate-wide error type.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector must be non-empty")]
    EmptyVector,
    #[error("{context}: non-finite value")]
    NonFinite { context: &'static str },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("not a distribution: entries must lie in [0, 1] and sum to 1 (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("simplex projection failed to bracket the waterfill root (residual {residual})")]
    ProjectionFailed { residual: f64 },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam {
        name: &'static str,
        reason: &'static str,
    },
    #[error("{kind} index {index} out of bounds for slot {slot} (bound {bound})")]
    IndexOutOfBounds {
        kind: &'static str,
        slot: usize,
        index: usize,
        bound: usize,
    },
    #[error("assignment space too large to enumerate: {states} states (limit {limit})")]
    ShapeTooLarge { states: u128, limit: u64 },
    #[error("loss table has wrong size: expected {expected} entries, got {got}")]
    TableSizeMismatch { expected: u64, got: usize },
    #[error("loss must be finite and non-negative, got {value}")]
    InvalidLoss { value: f64 },
    #[error("remote evaluator spec cannot be instantiated without a transport")]
    RemoteNeedsTransport,
    #[error("evaluator transport failure (retryable: {retryable}): {message}")]
    Transport { retryable: bool, message: String },
    #[error("template is missing the fragment placeholder {placeholder}")]
    MissingVarPlaceholder { placeholder: &'static str },
    #[error("template placeholder [{name}] has no substitution")]
    UnboundPlaceholder { name: String },
    #[error("vocabulary size {vocab} does not cover token index {index}")]
    VocabMismatch { vocab: usize, index: usize },
    #[error("demonstration realization does not match the one the estimate was computed for")]
    DemoMismatch,
    #[error("point is already feasible (h = {h} <= epsilon = {epsilon}); no plane to generate")]
    PointFeasible { h: f64, epsilon: f64 },
}

impl Error {
    /// Transport failures that the caller may retry (timeouts, dropped
    /// connections). Protocol violations and malformed assignments are not
    /// retryable.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { retryable: true, .. })
    }
}
