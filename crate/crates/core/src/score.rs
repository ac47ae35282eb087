//! Score functions: maps `(x, t) -> s_x(t) ∈ R^d_{≥0}` evaluated at
//! *forward* time `t`.
//!
//! Reverse-time consumers (the sampler, the reverse-generator oracle) convert
//! their reverse clock `τ` to forward time `T - τ` before querying.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hypercube::{check_dense_dim, DenseDistribution, HypercubeState, ScoreVector};

/// A (possibly learned) discrete score.
pub trait ScoreFn: Send + Sync {
    fn dim(&self) -> u32;

    /// Writes `s_x(t)` into `out`, which has length `d`.
    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()>;

    fn score(&self, x: HypercubeState, t: f64) -> Result<ScoreVector> {
        let mut out = vec![0.0; self.dim() as usize];
        self.score_into(x, t, &mut out)?;
        ScoreVector::new(out)
    }

    /// Forward times at which the score may be discontinuous. Quadrature and
    /// ODE integration split their grids there.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for &S {
    fn dim(&self) -> u32 {
        (**self).dim()
    }
    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, out)
    }
    fn breakpoints(&self) -> Vec<f64> {
        (**self).breakpoints()
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for Box<S> {
    fn dim(&self) -> u32 {
        (**self).dim()
    }
    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, out)
    }
    fn breakpoints(&self) -> Vec<f64> {
        (**self).breakpoints()
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for Arc<S> {
    fn dim(&self) -> u32 {
        (**self).dim()
    }
    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, out)
    }
    fn breakpoints(&self) -> Vec<f64> {
        (**self).breakpoints()
    }
}

pub(crate) fn check_query(dim: u32, x: HypercubeState, out: &[f64]) -> Result<()> {
    if x.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim as usize,
            got: x.dim() as usize,
        });
    }
    if out.len() != dim as usize {
        return Err(Error::DimensionMismatch {
            expected: dim as usize,
            got: out.len(),
        });
    }
    Ok(())
}

/// The true score of the forward marginals started from `p0`.
///
/// Writing `r = tanh(t)`, the heat kernel is proportional to `r^{|w|}`, so
///
/// ```text
/// p_{x+e_i}(t) / p_x(t) = Σ_a p0(a) r^{|x+a+e_i|} / Σ_a p0(a) r^{|x+a|}
/// ```
///
/// which costs `O(|supp p0| · d)` per query and never forms `p(t)`.
#[derive(Debug, Clone)]
pub struct ExactScore {
    p0: DenseDistribution,
    support: Vec<(u64, f64)>,
}

impl ExactScore {
    pub fn new(p0: DenseDistribution) -> Result<Self> {
        check_dense_dim(p0.dim())?;
        let support = p0
            .mass()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(a, &m)| (a as u64, m))
            .collect();
        Ok(Self { p0, support })
    }

    pub fn data(&self) -> &DenseDistribution {
        &self.p0
    }
}

impl ScoreFn for ExactScore {
    fn dim(&self) -> u32 {
        self.p0.dim()
    }

    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        check_query(self.dim(), x, out)?;
        if t.is_nan() || t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        let d = self.dim();
        if t == 0.0 {
            let px = self.p0.prob(x);
            if px <= 0.0 {
                return Err(Error::ZeroMass { bits: x.bits() });
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.p0.prob(x.flip(i as u32)) / px;
            }
            return Ok(());
        }
        let r = t.tanh();
        let mut powers = [0.0f64; 26];
        powers[0] = 1.0;
        for k in 1..=(d as usize + 1) {
            powers[k] = powers[k - 1] * r;
        }
        out.fill(0.0);
        let mut denom = 0.0;
        for &(a, m) in &self.support {
            let w = x.bits() ^ a;
            let h = w.count_ones() as usize;
            denom += m * powers[h];
            let up = m * powers[h + 1];
            let down = if h > 0 { m * powers[h - 1] } else { 0.0 };
            for (i, o) in out.iter_mut().enumerate() {
                *o += if (w >> i) & 1 == 1 { down } else { up };
            }
        }
        if denom <= 0.0 {
            return Err(Error::ZeroMass { bits: x.bits() });
        }
        out.iter_mut().for_each(|o| *o /= denom);
        Ok(())
    }
}

/// A score that is the same vector at every state and time.
#[derive(Debug, Clone)]
pub struct ConstantScore {
    dim: u32,
    value: Vec<f64>,
}

impl ConstantScore {
    pub fn new(value: Vec<f64>) -> Result<Self> {
        let dim = value.len() as u32;
        ScoreVector::new(value.clone())?;
        if dim == 0 {
            return Err(Error::Dimension {
                dim,
                reason: "score needs at least one coordinate",
            });
        }
        Ok(Self { dim, value })
    }

    /// All ones: the exact score of the uniform law.
    pub fn ones(dim: u32) -> Self {
        Self {
            dim,
            value: vec![1.0; dim as usize],
        }
    }
}

impl ScoreFn for ConstantScore {
    fn dim(&self) -> u32 {
        self.dim
    }

    fn score_into(&self, x: HypercubeState, _t: f64, out: &mut [f64]) -> Result<()> {
        check_query(self.dim, x, out)?;
        out.copy_from_slice(&self.value);
        Ok(())
    }
}
