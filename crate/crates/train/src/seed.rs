//! Deterministic derivation of independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer applied to `base` offset by `tag`.
pub fn derive(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(base: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag))
}

pub const TAG_VIEWS: u64 = 1;
pub const TAG_PRETRAIN: u64 = 2;
pub const TAG_SUPERVISED: u64 = 3;
pub const TAG_REGULARIZER: u64 = 4;
pub const TAG_PROTOCOL: u64 = 5;
pub const TAG_EMBED_INIT: u64 = 6;
pub const TAG_HEAD_INIT: u64 = 7;
