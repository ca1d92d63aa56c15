//! Seeded, splittable random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// Purpose tags that select independent streams of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Gumbel = 2,
    Shuffle = 3,
    Data = 4,
    Split = 5,
}

pub fn stream(seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Stream for one `index` (e.g. a training step) of a purpose, so that
/// resuming at any index reproduces the same draws.
pub fn indexed_stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | purpose as u64 | 0x80);
    rng
}

/// Tensor of i.i.d. `normal(0, std²)` draws.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite non-negative std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches length")
}
