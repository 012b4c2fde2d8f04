//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator; child seeds are
//! derived with SplitMix64 so that independent runs never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stable stream tags so that call sites do not collide by accident.
pub mod stream {
    pub const PHANTOM: u64 = 1;
    pub const GAN_INIT: u64 = 2;
    pub const GAN_TRAIN: u64 = 3;
    pub const SCREEN: u64 = 4;
    pub const GROWTH: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const FOLDS: u64 = 7;
    pub const EMBEDDING: u64 = 8;
    pub const SAMPLING: u64 = 9;
    pub const CALIBRATION: u64 = 10;
}
