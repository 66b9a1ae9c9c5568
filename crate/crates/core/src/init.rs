//! Seeded parameter initialization.
//!
//! Every parameter tensor gets its own generator, seeded from the run seed and
//! the parameter's name, so adding or removing a tensor never shifts the values
//! drawn for the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Tensor;

/// Stable 64-bit FNV-1a hash; used to derive per-name seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Glorot init for a weight whose first axis is the output dimension and
/// whose remaining axes form the receptive field of one output unit.
pub fn glorot_for(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let numel: usize = shape.iter().product();
    let fan_out_units = shape[0];
    let fan_in = numel / fan_out_units;
    let receptive: usize = shape.iter().skip(2).product();
    let fan_out = fan_out_units * receptive;
    glorot_uniform(shape, fan_in, fan_out, &mut rng_for(seed, name))
}
