//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor mechanics, model evaluation, selection, and
/// optimization.
#[derive(Debug, Error)]
pub enum Error {
    /// Flat index outside `rows * cols`.
    #[error("index {index} out of range for tensor with {len} codes")]
    IndexOutOfRange { index: usize, len: usize },

    /// Bit position at or above the format's code width.
    #[error("bit position {pos} invalid for {format} (code width {width})")]
    InvalidBitPosition {
        pos: u8,
        format: &'static str,
        width: u8,
    },

    /// A stored code violates the format's invariants.
    #[error("invalid {format} code {code:#04b} at index {index}")]
    InvalidCode {
        format: &'static str,
        code: u8,
        index: usize,
    },

    /// Tensor or dataset shapes disagree.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    /// Non-finite values where finite ones are required.
    #[error("non-finite input: {context}")]
    NonFinite { context: String },

    /// Unknown layer name in a flip set or mask request.
    #[error("no layer named {name:?} in model")]
    UnknownLayer { name: String },

    /// Layer exists but is not an attackable quantized layer.
    #[error("layer {name:?} has no attackable weights")]
    NotAttackable { name: String },

    /// Checkpoint / dataset / flip-set file could not be parsed.
    #[error("malformed {kind} file {path:?}: {detail}")]
    Malformed {
        kind: &'static str,
        path: String,
        detail: String,
    },

    /// File declares a version this build does not understand.
    #[error("unsupported {kind} version {found} (expected {expected})")]
    VersionMismatch {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    /// Underlying I/O failure.
    #[error("io error on {path:?}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// `top_k_indices` called with k outside `1..=len`.
    #[error("k = {k} out of range for score vector of length {len}")]
    KOutOfRange { k: usize, len: usize },

    /// Empty sampling-rate set handed to subset selection.
    #[error("sampling-rate set is empty")]
    EmptyRates,

    /// Sampling rates must be positive and strictly ascending.
    #[error("invalid sampling rates: {context}")]
    InvalidRates { context: String },

    /// No sweep point reached the loss threshold. Carries the best loss
    /// observed per layer so callers can report how far the sweep got.
    #[error("no weight subset reached the loss threshold {threshold}; max loss per layer: {}",
        per_layer_max.iter().map(|(l, v)| format!("{l}={v:.6}")).collect::<Vec<_>>().join(", "))]
    ThresholdNotReached {
        threshold: f64,
        per_layer_max: Vec<(String, f64)>,
    },

    /// Fitness of an empty candidate is undefined.
    #[error("fitness undefined for empty solution (cardinality 0)")]
    EmptyCardinality,

    /// Tournament selection needs at least two candidates.
    #[error("population of {len} too small for tournament selection")]
    PopulationTooSmall { len: usize },

    /// A flip set that must be non-empty is empty.
    #[error("flip set is empty: {context}")]
    EmptyFlipSet { context: String },

    /// Exhaustive search would enumerate too many subsets.
    #[error("combinatorial guard exceeded: {subsets} subsets of sizes 1..={max_size} over {space} indices (limit {limit})")]
    GuardExceeded {
        space: usize,
        max_size: usize,
        subsets: u128,
        limit: u128,
    },

    /// Invalid configuration value.
    #[error("invalid config: {context}")]
    InvalidConfig { context: String },
}
