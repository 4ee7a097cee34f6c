//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the root seed plus a path of
//! integer labels, e.g. `[SPLIT, split_index]` or `[CHAIN, chain_index]`.
//! The path is folded through the SplitMix64 finalizer, so sibling streams
//! are decorrelated and a single root seed reproduces a whole sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used across the crate.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const HALVE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const RESTARTS: u64 = 5;
    pub const BASIS: u64 = 6;
    pub const CHAIN: u64 = 7;
    pub const SAMPLER: u64 = 8;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a label path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &label| {
        splitmix64(acc ^ splitmix64(label))
    })
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
