//! Shared error type for the search engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Resolution-level counts outside 2..=4 blow up the dense pattern tables.
    #[error("unsupported resolution count D={0}: supported range is 2..=4")]
    UnsupportedDepth(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// All edge probabilities collapsed to zero; the pattern distribution is undefined.
    #[error("degenerate pattern distribution at layer {layer}: normalizer {z:e} below 1e-300")]
    DegenerateDistribution { layer: usize, z: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("infeasible topology: I({layer}) -> I({}) violates the feasibility table", layer + 1)]
    InfeasibleTopology { layer: usize },

    #[error("instance too large for exhaustive decode: M^L = {size:e} exceeds 1e7")]
    InstanceTooLarge { size: f64 },

    /// The decode graph always admits a source-to-sink path; hitting this is a bug.
    #[error("internal invariant violated: no source-to-sink path in decode graph")]
    NoPath,

    #[error("search diverged at iteration {iter} ({context})")]
    Divergence { iter: usize, context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
