//! Deterministic RNG streams.
//!
//! Every stochastic decision draws from a ChaCha8 stream keyed by
//! `(seed, domain, index)`, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Distinct values keep unrelated streams independent.
pub mod domain {
    pub const SYNTH_CLIP: u64 = 1;
    pub const EPOCH_ORDER: u64 = 2;
    pub const TRAIN_STEP: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PROBE_CROPS: u64 = 6;
    pub const PROBE_TRAIN: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> Rng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}
