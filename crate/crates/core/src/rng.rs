//! Deterministic random streams.
//!
//! Every consumer of randomness receives its own stream derived from a base
//! seed and a path of integer labels, so results never depend on the order
//! in which independent streams are consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Well-known labels for derived streams.
pub mod label {
    pub const INIT: u64 = 0x1;
    pub const DATA: u64 = 0x2;
    pub const TRAIN: u64 = 0x3;
    pub const ADAPTATION: u64 = 0x4;
    pub const RETENTION: u64 = 0x5;
    pub const SAMPLER: u64 = 0x6;
    pub const PROJECTIONS: u64 = 0x7;
    pub const EVAL: u64 = 0x8;
    pub const BANK: u64 = 0x9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `labels` into `seed`, one splitmix round per label.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}
