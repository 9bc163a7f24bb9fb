//! Deterministic RNG substreams.
//!
//! Every stochastic choice in the crate draws from a stream derived from a
//! user seed plus a tag path (stage, generation, slot). Streams are
//! independent of evaluation order, so parallel schedules cannot change
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags keeping substreams of different pipeline phases disjoint.
pub mod tag {
    pub const SYNTH_DATA: u64 = 0x01;
    pub const GA_INIT: u64 = 0x02;
    pub const GA_BREED: u64 = 0x03;
    pub const PRUNE: u64 = 0x04;
    pub const FIXTURE: u64 = 0x05;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG for `(seed, tags...)`.
///
/// The tag path is folded through splitmix64 so that distinct paths yield
/// uncorrelated streams and the same path always yields the same stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x42_4954_4252_4b52); // domain constant
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(state)
}
