//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit seed. A seed selects a
//! ChaCha20 key and a stream id selects one of 2^64 independent counter
//! streams under that key, so different purposes (truth, observation noise,
//! initial ensemble, rotations) never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Vector;

pub type Rng = ChaCha20Rng;

pub mod streams {
    pub const TRUTH: u64 = 1;
    pub const OBSERVATION_NOISE: u64 = 2;
    pub const INITIAL_CONDITION: u64 = 3;
    pub const ROTATION: u64 = 4;
    pub const CLIMATOLOGY: u64 = 5;
}

/// Generator for `seed` positioned at the start of `stream`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal_vector(rng: &mut Rng, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}
