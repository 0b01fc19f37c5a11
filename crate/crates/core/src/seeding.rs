//! Counter-based seed derivation. Every random stream is keyed by the root
//! seed plus a purpose tag and its coordinates (epoch, photo, query...), so a
//! stream never depends on how many draws some other stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PHOTO_ORDER: u64 = 2;
    pub const INSTANCE_ORDER: u64 = 3;
    pub const INFERENCE_ORDER: u64 = 4;
    pub const GEN_WORLD: u64 = 5;
    pub const GEN_PHOTO: u64 = 6;
    pub const APPEARANCE: u64 = 7;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, parts))
}
