//! Seed derivation for reproducible, independently-streamed RNGs.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha8 stream whose
//! seed is a hash of (run seed, purpose salt). Streams are therefore
//! independent of evaluation order and stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used as a seed mixer, not as a sequence generator.
pub(crate) fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a (seed, salt) pair.
pub(crate) fn derived_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt)))
}

/// Stable salt from a short label plus indices, for naming RNG purposes.
pub(crate) fn salt(label: &str, a: u64, b: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for byte in label.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h = splitmix64(h ^ a.rotate_left(17));
    splitmix64(h ^ b)
}
