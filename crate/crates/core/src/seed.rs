//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a `u64`; independent sub-streams are derived by mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th sub-stream of `base`.
pub fn derive(base: u64, index: u64) -> u64 {
    mix(mix(base) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Seed that depends on the exact bit pattern of `values`.
pub fn hash_f64s(base: u64, values: &[f64]) -> u64 {
    values
        .iter()
        .fold(mix(base), |acc, v| mix(acc ^ v.to_bits()))
}
