//! Seed derivation.
//!
//! Every random stream in the crate comes from an explicit `u64` seed. Child
//! streams are derived by folding stream indices into the parent seed with
//! the SplitMix64 finalizer:
//!
//! ```text
//! derive(seed, k) = mix64(seed ^ mix64(k + 0x9E3779B97F4A7C15))
//! ```
//!
//! so `(root_seed, n, rep, stream)` always maps to the same generator no
//! matter which thread runs the repetition.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function (a 64-bit avalanche mix).
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines `seed` with one stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
}

/// Folds a path of stream indices into `seed`, left to right.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &k| derive_seed(s, k))
}

/// The generator type used everywhere in the crate.
pub type StreamRng = ChaCha12Rng;

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
