//! Seed derivation for reproducible randomness.
//!
//! Every stochastic component draws from a `ChaCha8Rng` seeded through
//! [`derive_seed`], so a run is fully determined by its master seed and the
//! context labels mixed into it. No global RNG state anywhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with context words (case index, epoch, purpose tag...)
/// into a new stream seed.
pub fn derive_seed(base: u64, context: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x6a09_e667_f3bc_c908);
    for &word in context {
        state = mix(state ^ mix(word));
    }
    state
}

/// RNG seeded from a derived seed.
pub fn rng_from(base: u64, context: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, context))
}
