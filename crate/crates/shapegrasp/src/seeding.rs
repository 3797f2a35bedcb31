//! Deterministic seed derivation for parallel, order-independent
//! generation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; good avalanche, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `(base, salt, index)`.
pub fn derive_seed(base: u64, salt: &str, index: u64) -> u64 {
    let mut h = base;
    for byte in salt.bytes() {
        h = splitmix64(h ^ u64::from(byte));
    }
    splitmix64(h ^ index)
}

/// Seeded, platform-stable RNG.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
