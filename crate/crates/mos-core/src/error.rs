//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MosError {
    /// Matrix/vector dimensions do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration (divisibility, variant fields, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// A parameter budget does not resolve to an integral sizing.
    #[error("budget {budget} does not resolve: {detail} (nearest feasible: {nearest_lower} or {nearest_upper})")]
    Budget {
        budget: u64,
        detail: String,
        nearest_lower: u64,
        nearest_upper: u64,
    },

    /// An index matrix references a shard outside its pool.
    #[error("routing error: {0}")]
    Routing(String),

    /// Arguments outside the domain of a closed-form count.
    #[error("domain error: {0}")]
    Domain(String),

    /// A toy task with no samples cannot be trained on.
    #[error("empty task: num_samples must be >= 1")]
    EmptyTask,

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Registry operations on tenant ids.
    #[error("tenant {0:?} is already registered")]
    DuplicateTenant(String),
    #[error("unknown tenant {0:?}")]
    UnknownTenant(String),

    /// A composed-adapter cache entry no longer matches the pool version.
    #[error("stale cache entry for {key}: cached pool version {cached}, current {current}")]
    StaleCache {
        key: String,
        cached: u64,
        current: u64,
    },

    /// Malformed adapter file (magic, version, CRC, layout).
    #[error("adapter file error: {0}")]
    Format(String),

    /// A loaded state violates a structural invariant.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MosError>;
