//! Seeded random streams. Every stochastic component draws from its own
//! ChaCha stream derived from the run seed, so runs are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type RunRng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ENV: u64 = 2;
pub const STREAM_AGENT: u64 = 3;
pub const STREAM_BUFFER: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_SPLIT: u64 = 6;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    rng.random_range(low..high)
}
