#![allow(dead_code)]

use cubediff::hypercube::{tv, DenseDistribution, HypercubeState};
use rand::Rng;

pub fn random_law<R: Rng>(dim: u32, rng: &mut R) -> DenseDistribution {
    let w = (0..1u64 << dim).map(|_| rng.random::<f64>() + 1e-3).collect();
    DenseDistribution::from_weights(dim, w).unwrap()
}

pub fn empirical_tv<I>(dim: u32, states: I, reference: &DenseDistribution) -> f64
where
    I: IntoIterator<Item = HypercubeState>,
{
    tv(&DenseDistribution::empirical(dim, states).unwrap(), reference).unwrap()
}

/// `4 √(2^d / n)`: a generous upper envelope of the expected empirical TV.
pub fn tv_noise_floor(dim: u32, n: usize) -> f64 {
    4.0 * ((1u64 << dim) as f64 / n as f64).sqrt()
}
