//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! master seed plus a path of tags (epoch, batch, restart, sample...), so
//! runs are reproducible and independent units can be evaluated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

// Tag namespaces keep streams used for different purposes apart.
pub const TAG_INIT: u64 = 0x1717;
pub const TAG_SHUFFLE: u64 = 0x5u64 << 32;
pub const TAG_TRAIN: u64 = 0x7u64 << 32;
pub const TAG_ATTACK: u64 = 0xAu64 << 32;
pub const TAG_SMOOTH: u64 = 0x5Au64 << 32;
pub const TAG_DATA: u64 = 0xDu64 << 32;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, tags...)`.
pub fn derive(seed: u64, tags: &[u64]) -> Rng {
    let key = tags
        .iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
