//! Seed derivation. Every random draw in the crate comes from a stream keyed
//! by a tuple of integers, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a key tuple.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_0F_F00D_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// A ChaCha stream keyed by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// A uniform draw in `[0, 1)` that depends only on `parts`.
pub fn keyed_uniform(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Stream domains, so that different consumers of the same seed never share
/// draws.
pub mod domain {
    pub const SBM: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const NATURAL_MASK: u64 = 3;
    pub const ARTIFICIAL_MASK: u64 = 4;
    pub const INIT: u64 = 5;
    pub const CLIENT: u64 = 6;
    pub const SERVER: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const THEORY: u64 = 10;
}
