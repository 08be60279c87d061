//! Deterministic seed derivation.
//!
//! Batch work derives one independent child seed per item from a master seed,
//! so items can be produced in any order (or in parallel) without changing
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; bijective on `u64`.
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for item `index` of a batch governed by `master`.
///
/// Pure function of its arguments; distinct indices give decorrelated seeds
/// even for small masters like 0 and 1.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// The seeded RNG stream used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
