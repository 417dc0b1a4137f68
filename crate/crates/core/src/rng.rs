//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a tuple
//! of integers (run seed, subject, frame, step, ...). Streams never share
//! state, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5A5A_1234_C0FF_EE00, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A fresh generator for the given key tuple.
pub fn rng_for(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Domain-separation tags so independent consumers of the same seed never collide.
pub mod stream {
    pub const SUBJECT: u64 = 1;
    pub const FRAME: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const FEWSHOT: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const AUX: u64 = 7;
    pub const INIT: u64 = 8;
    pub const STEP: u64 = 9;
}
