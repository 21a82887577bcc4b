//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is a pure function of the run seed and a path of tags,
//! which is what makes single-worker runs bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags
        .iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc.rotate_left(23) ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// Tags naming independent streams.
pub(crate) const HR_PATCH: u64 = 1;
pub(crate) const LR_PATCH: u64 = 2;
pub(crate) const NOISE: u64 = 3;
pub(crate) const INIT: u64 = 4;
pub(crate) const SPLIT: u64 = 6;
pub(crate) const ORACLE: u64 = 7;
pub(crate) const PERTURB: u64 = 8;
pub(crate) const DISC: u64 = 9;
pub(crate) const TEXTURE: u64 = 10;
