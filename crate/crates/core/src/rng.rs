//! Deterministic RNG substreams.
//!
//! Every random draw in a study is keyed by a path of integers
//! (master seed, cell, case, stage, ...). The mapping from path to stream
//! is a pure function, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a key.
pub fn derive_seed(parent: u64, key: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ key.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Derive a seed from a path of keys.
pub fn seed_path(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(root, |s, &k| derive_seed(s, k))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit key for a string label (FNV-1a).
pub fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
