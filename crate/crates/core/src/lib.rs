//! Bit-flip attack pipeline against in-repo quantized toy networks.
//!
//! The crate is organized around the attack stages:
//!
//! - [`qtensor`]: quantized weight storage and the bit-flip mechanics.
//! - [`model`]: toy networks, loss/gradient evaluation, checkpoint I/O.
//! - [`sensitivity`]: hybrid weight scoring and layer ranking.
//! - [`subsetsel`]: sampling-rate sweeps that extract a critical subset.
//! - [`genbfa`]: evolutionary minimization of the flip set plus iterative
//!   pruning.
//! - [`oracle`]: exhaustive brute-force searchers used for verification.
//!
//! Evaluations apply flips as virtual overlays at dequantization time, so
//! models are never mutated and every stage is pure and parallel-safe.

pub mod error;
pub mod flipset;
pub mod fixtures;
pub mod genbfa;
pub mod model;
pub mod oracle;
pub mod qtensor;
pub mod rng;
pub mod sensitivity;
pub mod subsetsel;
#[cfg(any(test, feature = "testsupport"))]
pub mod testsupport;

pub use error::{Error, Result};
pub use flipset::{load_flipset, save_flipset, FlipSet};
pub use model::{
    accuracy, forward_loss, gradients, load_checkpoint, load_dataset, mask_weights, perplexity,
    save_checkpoint, save_dataset, synth_dataset, Activation, Dataset, GradientMap, LayerKind,
    LayerSpec, ToyModel, LOSS_SENTINEL,
};
pub use qtensor::{default_flip_position, QuantFormat, QuantizedTensor, NF4_LEVELS};
pub use sensitivity::{
    bflip_loss, normalize, rank_layers, sscore, top_k_count, top_k_indices, SensitivityConfig,
    SensitivityProfile,
};
pub use subsetsel::{default_rates, select_subset, SubsetConfig, SubsetRecord, SubsetSelection};
pub use genbfa::{
    crossover, fitness, mutate, optimize, prune, tournament_select, GaConfig, GenerationStats,
    OptimizeOutcome, PruneConfig, Solution,
};
pub use oracle::{exhaustive_min_flipset, verify_topk, OracleResult};
