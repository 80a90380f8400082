//! Seed derivation. Every random stream is forked from the run seed as
//! `seed + fnv1a64(tag)` (wrapping), so modules never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed.wrapping_add(fnv1a64(tag.as_bytes()))
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Stream for one indexed item, e.g. the dropout masks of one window in one epoch.
pub fn rng_indexed(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let s = derive_seed(seed, tag)
        ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    ChaCha8Rng::seed_from_u64(s)
}
