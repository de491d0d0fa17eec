//! Per-task seed derivation.
//!
//! Every random stream in an experiment comes from the master seed through
//! [`derive`], which folds a list of integer tags into the seed with the
//! SplitMix64 finalizer. Generators are ChaCha8 seeded with the derived value,
//! so a (master seed, tag path) pair names one reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path of tags.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(master), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Seeded generator for a derived stream.
pub fn rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

/// Stream tags, so unrelated consumers never share a derivation path.
pub mod tag {
    pub const SCENARIO: u64 = 1;
    pub const DETECTOR: u64 = 2;
    pub const TRAFFIC: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const PAYLOAD: u64 = 5;
}
