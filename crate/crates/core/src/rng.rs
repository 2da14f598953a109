//! Deterministic RNG derivation. Every random stream in the pipeline is a
//! ChaCha8 generator keyed by the run seed and a path of integers (stage,
//! epoch, step, item, ...), so any stream can be recreated without replaying
//! the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn child_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, so the same numeric path never collides across uses.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const GENERATOR_INIT: u64 = 2;
    pub const DISCRIMINATOR_INIT: u64 = 3;
    pub const CLASSIFIER_INIT: u64 = 4;
    pub const SPLIT: u64 = 10;
    pub const AUGMENT: u64 = 11;
    pub const TOY: u64 = 12;
    pub const PRETRAIN_BATCH: u64 = 20;
    pub const EPOCH_ORDER: u64 = 21;
    pub const REFERENCES: u64 = 22;
    pub const CLASSIFIER_BATCH: u64 = 23;
    pub const SYNTHESIS: u64 = 30;
}
