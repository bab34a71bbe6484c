//! Deterministic seed derivation.
//!
//! Every stochastic component (init, shuffling, sampling) draws from a
//! ChaCha stream seeded through `derive_seed`, so a run is a pure function
//! of its base seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix a base seed with a label path into a new seed (splitmix64 chain).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    for &p in path {
        state = splitmix64(state ^ splitmix64(p));
    }
    splitmix64(state)
}

/// RNG for a derived stream.
pub fn rng_for(base: u64, path: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, path))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
