//! Deterministic stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! the run seed plus a list of tags (purpose, epoch, sample index, ...).
//! Streams are independent of worker count and call order, which is what
//! makes whole runs bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the fixed purposes used across the crate.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const ORDER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const TOKEN: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a generator from `seed` and a tag path. Identical inputs yield
/// identical streams; distinct tag paths yield independent streams.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        acc ^= splitmix64(&mut state);
    }
    ChaCha8Rng::seed_from_u64(acc)
}
