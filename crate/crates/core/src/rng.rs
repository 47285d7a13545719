//! Seeded generator streams.
//!
//! Each consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, so adding or removing one consumer never shifts the
//! numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod stream {
    pub const SEGMENTS: u64 = 1;
    pub const REPARAM: u64 = 2;
    pub const TARGET_CODES: u64 = 3;
    pub const INIT_BASE: u64 = 10;
    pub const INIT_CLASSIFIER: u64 = 11;
    pub const INIT_MOE: u64 = 12;
    pub const CORPUS: u64 = 100;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
