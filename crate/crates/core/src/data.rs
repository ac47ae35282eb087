//! Named data distributions used by experiments and tests.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{check_dense_dim, DenseDistribution, HypercubeState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataPreset {
    /// All mass on one state.
    PointMass {
        #[serde(default)]
        state: u64,
    },
    /// Independent coordinates, each equal to 1 with probability `q`.
    ProductBernoulli { q: f64 },
    /// Masses drawn from a symmetric Dirichlet over all `2^d` states.
    RandomDirichlet {
        #[serde(default = "one")]
        alpha: f64,
    },
    /// Equal mixture of two product laws concentrated at `0…0` and `1…1`,
    /// each coordinate off its mode with probability `noise`.
    TwoMode { noise: f64 },
    /// Random law whose neighbor ratios are all at most `l`.
    BoundedRatio { l: f64 },
}

fn one() -> f64 {
    1.0
}

impl DataPreset {
    /// Builds the distribution; random presets consume `rng`.
    pub fn build<R: Rng + ?Sized>(&self, dim: u32, rng: &mut R) -> Result<DenseDistribution> {
        check_dense_dim(dim)?;
        match *self {
            DataPreset::PointMass { state } => DenseDistribution::point_mass(HypercubeState::new(state, dim)?),
            DataPreset::ProductBernoulli { q } => product_bernoulli(dim, q),
            DataPreset::RandomDirichlet { alpha } => random_dirichlet(dim, alpha, rng),
            DataPreset::TwoMode { noise } => two_mode(dim, noise),
            DataPreset::BoundedRatio { l } => bounded_ratio(dim, l, rng),
        }
    }
}

fn check_probability(name: &str, q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {q}")))
    }
}

pub fn product_bernoulli(dim: u32, q: f64) -> Result<DenseDistribution> {
    check_dense_dim(dim)?;
    check_probability("q", q)?;
    let mass = (0..1u64 << dim)
        .map(|x| {
            let k = x.count_ones() as i32;
            q.powi(k) * (1.0 - q).powi(dim as i32 - k)
        })
        .collect();
    DenseDistribution::from_weights(dim, mass)
}

pub fn random_dirichlet<R: Rng + ?Sized>(dim: u32, alpha: f64, rng: &mut R) -> Result<DenseDistribution> {
    check_dense_dim(dim)?;
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|_| Error::InvalidParameter(format!("Dirichlet alpha must be positive, got {alpha}")))?;
    let weights: Vec<f64> = (0..1u64 << dim).map(|_| gamma.sample(rng)).collect();
    DenseDistribution::from_weights(dim, weights)
}

pub fn two_mode(dim: u32, noise: f64) -> Result<DenseDistribution> {
    check_dense_dim(dim)?;
    check_probability("noise", noise)?;
    let all = (1u64 << dim) - 1;
    let product = |k: u32| noise.powi(k as i32) * (1.0 - noise).powi((dim - k) as i32);
    let mass = (0..=all)
        .map(|x| 0.5 * product(x.count_ones()) + 0.5 * product((x ^ all).count_ones()))
        .collect();
    DenseDistribution::from_weights(dim, mass)
}

/// `p ∝ exp(Σ a_i x_i + c h(x))` with `h ∈ [0, 1]` arbitrary and
/// `|a_i| + c < ln L`, so one flip moves the exponent by less than `ln L`.
pub fn bounded_ratio<R: Rng + ?Sized>(dim: u32, l: f64, rng: &mut R) -> Result<DenseDistribution> {
    check_dense_dim(dim)?;
    if !(l >= 1.0 && l.is_finite()) {
        return Err(Error::InvalidParameter(format!("ratio bound must be >= 1, got {l}")));
    }
    let budget = 0.499 * l.ln();
    let a: Vec<f64> = (0..dim).map(|_| budget * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let weights = (0..1u64 << dim)
        .map(|x| {
            let linear: f64 = (0..dim).filter(|i| (x >> i) & 1 == 1).map(|i| a[i as usize]).sum();
            (linear + budget * rng.random::<f64>()).exp()
        })
        .collect();
    DenseDistribution::from_weights(dim, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_build_valid_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let presets = [
            DataPreset::PointMass { state: 5 },
            DataPreset::ProductBernoulli { q: 0.2 },
            DataPreset::RandomDirichlet { alpha: 1.0 },
            DataPreset::TwoMode { noise: 0.1 },
            DataPreset::BoundedRatio { l: 3.0 },
        ];
        for p in presets {
            let dist = p.build(4, &mut rng).unwrap();
            assert!((dist.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            DataPreset::PointMass { state: 5 }
                .build(4, &mut rng)
                .unwrap()
                .prob(HypercubeState::new(5, 4).unwrap()),
            1.0
        );
    }

    #[test]
    fn bernoulli_marginals() {
        let p = product_bernoulli(3, 0.25).unwrap();
        let first: f64 = p.states().filter(|x| x.bit(0)).map(|x| p.prob(x)).sum();
        assert!((first - 0.25).abs() < 1e-15);
        assert!(product_bernoulli(3, 1.5).is_err());
    }

    #[test]
    fn two_mode_is_symmetric() {
        let p = two_mode(4, 0.1).unwrap();
        for x in p.states() {
            assert!((p.prob(x) - p.prob(x.xor(HypercubeState::new(15, 4).unwrap()))).abs() < 1e-16);
        }
    }

    #[test]
    fn bounded_ratio_respects_its_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = bounded_ratio(6, 3.0, &mut rng).unwrap();
            assert!(p.max_neighbor_ratio() <= 3.0);
        }
        assert!(bounded_ratio(3, 0.5, &mut rng).is_err());
    }

    #[test]
    fn preset_config_uses_tagged_form() {
        let p: DataPreset = serde_json::from_str(r#"{"kind":"product-bernoulli","q":0.3}"#).unwrap();
        assert_eq!(p, DataPreset::ProductBernoulli { q: 0.3 });
        assert!(serde_json::from_str::<DataPreset>(r#"{"kind":"two-mode","noise":0.1,"x":1}"#).is_err());
    }
}
