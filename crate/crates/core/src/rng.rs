//! Seed derivation and counter-based uniforms.
//!
//! Every random quantity in the crate is a pure function of a user seed plus a
//! tuple of integer keys (replication index, matrix entry, ...). Child seeds are
//! produced by folding the keys through the SplitMix64 finalizer, so streams for
//! different keys are independent of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a sequence of keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

pub fn rng_for(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Uniform draw in `[0, 1)` determined entirely by `(seed, keys)`.
pub fn keyed_uniform(seed: u64, keys: &[u64]) -> f64 {
    (derive_seed(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stable 64-bit FNV-1a hash, used to key streams by column name.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tags used as the first key so that different generators never share a stream.
pub(crate) mod tag {
    pub const LOADINGS: u64 = 1;
    pub const SCM: u64 = 2;
    pub const MCAR: u64 = 3;
    pub const TWINS: u64 = 4;
    pub const STANDIN: u64 = 5;
    pub const FOLDS: u64 = 6;
    pub const INIT: u64 = 7;
    pub const REPLICATION: u64 = 8;
    pub const MOMENTS: u64 = 9;
}
