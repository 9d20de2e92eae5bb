//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a seed derived here, so results never depend on iteration order or
//! worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type DetRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for item `index` of a stream keyed by `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Child seed for a named stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stage
        .bytes()
        .fold(mix(seed ^ 0x5bd1_e995), |h, b| mix(h ^ b as u64))
}

pub fn rng(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
