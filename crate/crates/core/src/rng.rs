//! Seed derivation for every random stream in the simulator.
//!
//! All randomness descends from one root seed. Sub-streams are addressed by a
//! label path (purpose, parameter index, step, worker ...) which is hashed
//! with splitmix64 into the seed of an independent ChaCha stream. Streams
//! that must agree across workers (Q initialisation, Random-K indices, block
//! starts, sketch matrices, Atomo sampling) simply omit the worker label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Purpose labels, the first element of every label path.
pub mod label {
    pub const Q_INIT: u64 = 0x5149;
    pub const RANDOM_K: u64 = 0x524b;
    pub const RANDOM_BLOCK: u64 = 0x5242;
    pub const SKETCH: u64 = 0x534b;
    pub const ATOMO: u64 = 0x4154;
    pub const BEST_APPROX: u64 = 0x4241;
    pub const DATA: u64 = 0x4441;
    pub const BATCH: u64 = 0x4254;
    pub const INIT: u64 = 0x494e;
    pub const ORACLE: u64 = 0x4f52;
    pub const FIXTURE: u64 = 0x4658;
    pub const GS_FILL: u64 = 0x4753;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a label path into a 64-bit seed.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(root), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(root: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(root, labels))
}

pub fn standard_normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}
