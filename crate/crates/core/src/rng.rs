//! Deterministic seed derivation.
//!
//! Child seeds are derived with one round of the SplitMix64 finalizer applied to
//! `parent ^ (stream · golden_gamma)`, so independent streams of a run never share a state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(GOLDEN_GAMMA).rotate_left(17))
}

/// Seed for a labelled sub-stream, e.g. `derive_named(seed, "library")`.
pub fn derive_named(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label
    let h = label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    });
    derive_seed(seed, h)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
