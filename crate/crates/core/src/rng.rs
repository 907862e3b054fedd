//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is
//! derived from a root seed plus a tuple of tags (sample index, attribute
//! index, epoch, ...). Independent tags give independent streams, so one
//! attribute of one sample can be re-drawn without disturbing anything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used across the crate, so no two uses collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const LABEL: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INTERVENE: u64 = 6;
    pub const COUNTERFACTUAL: u64 = 7;
    pub const PATH_T: u64 = 8;
    pub const GRADCHECK: u64 = 9;
    pub const CBFT: u64 = 10;
    pub const HEAD: u64 = 11;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with a list of tags into a single 64-bit seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// RNG for the stream identified by `(root, tags)`.
pub fn stream(root: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, tags))
}
