//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a precondition (shape mismatch, bad range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A construction step was applied to a state where it is not legal.
    #[error("illegal transition: {0}")]
    IllegalTransition(String),

    /// A query that has no answer for this state (e.g. step distribution of
    /// a complete assignment).
    #[error("illegal query: {0}")]
    IllegalQuery(String),

    /// Exhaustive enumeration would exceed the configured limit.
    #[error("enumeration too large: {required} states exceeds limit {limit}")]
    EnumerationTooLarge { required: u128, limit: u64 },

    /// A loss or gradient became non-finite during training.
    #[error("training divergence: {0}")]
    TrainingDivergence(String),

    /// A model forward pass produced a non-finite output.
    #[error("model divergence: {0}")]
    ModelDivergence(String),

    /// An operation was requested before its inputs exist (empty buffer).
    #[error("not ready: {0}")]
    NotReady(String),

    /// A checkpoint could not be read back (version mismatch, truncation,
    /// corrupt payload).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A trajectory or internal structure violated an invariant the code
    /// relies on; indicates a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
