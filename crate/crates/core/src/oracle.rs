//! Brute-force ground truth for small chains: dense matrix exponential,
//! fixed-step RK4 on the Kolmogorov forward equation, and a generic
//! uniformization sampler for arbitrary dense generators.
//!
//! Nothing here knows about the tensor structure of the hypercube, which is
//! what makes it usable as an independent check on [`crate::hypercube`] and
//! [`crate::sampler`].

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::hypercube::{DenseDistribution, MASS_TOLERANCE};
use crate::score::ScoreFn;

/// Largest state count the dense oracle accepts.
pub const MAX_ORACLE_STATES: usize = 1 << 12;
/// Negative mass tolerated during integration before aborting.
pub const NEGATIVE_MASS_ABORT: f64 = 1e-8;
/// Default RK4 resolution of the reverse-marginal oracle.
pub const DEFAULT_STEPS_PER_UNIT: usize = 2000;

/// Dense rate matrix: off-diagonals nonnegative, rows summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    n: usize,
    rates: Vec<f64>,
}

impl GeneratorMatrix {
    /// Validates a row-major `n x n` rate matrix.
    pub fn new(n: usize, rates: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_ORACLE_STATES {
            return Err(Error::InvalidGenerator(format!(
                "state count {n} outside 1..={MAX_ORACLE_STATES}"
            )));
        }
        if rates.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: rates.len(),
            });
        }
        for x in 0..n {
            let row = &rates[x * n..(x + 1) * n];
            let mut sum = 0.0;
            let mut scale: f64 = 1.0;
            for (y, &q) in row.iter().enumerate() {
                if !q.is_finite() {
                    return Err(Error::InvalidGenerator(format!("non-finite rate at ({x}, {y})")));
                }
                if y != x && q < 0.0 {
                    return Err(Error::InvalidGenerator(format!(
                        "negative off-diagonal rate {q} at ({x}, {y})"
                    )));
                }
                sum += q;
                scale = scale.max(q.abs());
            }
            if sum.abs() > 1e-12 * scale {
                return Err(Error::InvalidGenerator(format!("row {x} sums to {sum}")));
            }
        }
        Ok(Self { n, rates })
    }

    /// Builds a generator from off-diagonal rates; the diagonal is filled in
    /// as minus the row sum.
    pub fn from_off_diagonal(n: usize, mut rate: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut rates = vec![0.0; n * n];
        for x in 0..n {
            let mut exit = 0.0;
            for y in 0..n {
                if y != x {
                    let q = rate(x, y);
                    rates[x * n + y] = q;
                    exit += q;
                }
            }
            rates[x * n + x] = -exit;
        }
        Self::new(n, rates)
    }

    /// The independent-flip generator on `{0,1}^d`, written out densely.
    pub fn hypercube(dim: u32) -> Result<Self> {
        let n = 1usize << dim;
        Self::from_off_diagonal(n, |x, y| if (x ^ y).count_ones() == 1 { 1.0 } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.rates[x * self.n + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rates[x * self.n..(x + 1) * self.n]
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.n).map(|x| -self.get(x, x)).fold(0.0, f64::max)
    }

    /// `out = p Q`.
    pub fn left_mul(&self, p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (x, &px) in p.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            for (o, &q) in out.iter_mut().zip(self.row(x)) {
                *o += px * q;
            }
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.rates)
    }
}

/// A generator that may vary in time.
pub trait TimeGenerator: Sync {
    fn n(&self) -> usize;

    fn generator_at(&self, t: f64) -> Result<GeneratorMatrix>;

    /// Times at which the generator may jump; integrators restart there.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl TimeGenerator for GeneratorMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn generator_at(&self, _t: f64) -> Result<GeneratorMatrix> {
        Ok(self.clone())
    }
}

/// Adapts a closure `t -> Q(t)`.
pub struct FnGenerator<F> {
    n: usize,
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(f64) -> Result<GeneratorMatrix> + Sync,
{
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F> TimeGenerator for FnGenerator<F>
where
    F: Fn(f64) -> Result<GeneratorMatrix> + Sync,
{
    fn n(&self) -> usize {
        self.n
    }

    fn generator_at(&self, t: f64) -> Result<GeneratorMatrix> {
        let q = (self.f)(t)?;
        if q.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: q.n(),
            });
        }
        Ok(q)
    }
}

/// The sampling dynamic as a dense generator in reverse time `τ`:
/// `x → x + e_i` at rate `s_x(T - τ)_i`.
pub struct ReverseGenerator<S> {
    score: S,
    horizon: f64,
}

impl<S: ScoreFn> ReverseGenerator<S> {
    pub fn new(score: S, horizon: f64) -> Self {
        Self { score, horizon }
    }
}

impl<S: ScoreFn> TimeGenerator for ReverseGenerator<S> {
    fn n(&self) -> usize {
        1 << self.score.dim()
    }

    fn generator_at(&self, tau: f64) -> Result<GeneratorMatrix> {
        let d = self.score.dim();
        let n = 1usize << d;
        let t_forward = self.horizon - tau;
        let mut rates = vec![0.0; n * n];
        let mut s = vec![0.0; d as usize];
        for x in 0..n {
            let state = crate::hypercube::HypercubeState::new(x as u64, d)?;
            self.score.score_into(state, t_forward, &mut s)?;
            let mut exit = 0.0;
            for (i, &r) in s.iter().enumerate() {
                rates[x * n + (x ^ (1 << i))] = r;
                exit += r;
            }
            rates[x * n + x] = -exit;
        }
        GeneratorMatrix::new(n, rates)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.score.breakpoints().into_iter().map(|b| self.horizon - b).collect()
    }
}

/// `e^{tQ}` by scaling and squaring with a truncated Taylor series. Returns a
/// row-stochastic matrix with rounding negatives above `-1e-12` clipped to 0.
pub fn expm(q: &GeneratorMatrix, t: f64) -> Result<DMatrix<f64>> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let n = q.n();
    let a = q.to_matrix() * t;
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = a / 2f64.powi(squarings);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &b / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    for v in result.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-12 {
                return Err(Error::InvalidGenerator(format!(
                    "matrix exponential produced entry {v}"
                )));
            }
            *v = 0.0;
        }
    }
    for x in 0..n {
        let sum: f64 = result.row(x).iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidGenerator(format!(
                "matrix exponential row {x} sums to {sum}"
            )));
        }
    }
    Ok(result)
}

/// `p · e^{tQ}` for a row vector `p`.
pub fn propagate_expm(q: &GeneratorMatrix, p: &[f64], t: f64) -> Result<Vec<f64>> {
    let m = expm(q, t)?;
    if p.len() != m.nrows() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: p.len(),
        });
    }
    let row = nalgebra::RowDVector::from_row_slice(p) * m;
    Ok(row.iter().copied().collect())
}

/// Result of integrating the forward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub p: Vec<f64>,
    /// `Σ p - 1` at the end; integration never renormalizes.
    pub mass_drift: f64,
    pub steps: usize,
}

impl OdeSolution {
    /// Converts to a hypercube distribution, zeroing negatives (which are
    /// bounded by [`NEGATIVE_MASS_ABORT`]) and dividing out the drift.
    pub fn to_distribution(&self, dim: u32) -> Result<DenseDistribution> {
        if self.mass_drift.abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "integrated mass drifted by {}",
                self.mass_drift
            )));
        }
        let w = self.p.iter().map(|&v| v.max(0.0)).collect();
        DenseDistribution::from_weights(dim, w)
    }
}

/// Classic RK4 on `dp/dt = p Q(t)` from `t0` to `t1` with `steps` equal steps.
pub fn integrate_forward<G: TimeGenerator + ?Sized>(
    gen: &G,
    p0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<OdeSolution> {
    let mut p = p0.to_vec();
    rk4_segment(gen, &mut p, t0, t1, steps)?;
    let drift = p.iter().sum::<f64>() - 1.0;
    Ok(OdeSolution {
        p,
        mass_drift: drift,
        steps,
    })
}

fn rk4_segment<G: TimeGenerator + ?Sized>(gen: &G, p: &mut [f64], t0: f64, t1: f64, steps: usize) -> Result<()> {
    let n = gen.n();
    if p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("RK4 needs at least one step".into()));
    }
    if !(t1 >= t0) {
        return Err(Error::InvalidParameter(format!("need t1 >= t0, got {t0} > {t1}")));
    }
    let h = (t1 - t0) / steps as f64;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let q_start = gen.generator_at(t)?;
        let q_mid = gen.generator_at(t + 0.5 * h)?;
        let q_end = gen.generator_at(t + h)?;

        q_start.left_mul(p, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        q_mid.left_mul(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        q_mid.left_mul(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + h * k3[i];
        }
        q_end.left_mul(&tmp, &mut k4);
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some((state, &mass)) = p
            .iter()
            .enumerate()
            .find(|(_, &m)| m < -NEGATIVE_MASS_ABORT || !m.is_finite())
        {
            return Err(Error::NegativeMass {
                state,
                time: t + h,
                mass,
            });
        }
    }
    Ok(())
}

/// Law at reverse time `T - δ` of the chain driven by `score_fn`, started
/// from `p_init`, by RK4 on the dense reverse generator.
///
/// The reverse interval is cut geometrically in remaining forward time (ratio
/// 3/2, where rates grow like `1/s`) and at the score's breakpoints; each
/// piece gets `max(16, ⌈len · steps_per_unit⌉)` equal steps.
pub fn reverse_marginal<S: ScoreFn>(
    score_fn: S,
    p_init: &DenseDistribution,
    horizon: f64,
    delta: f64,
    steps_per_unit: usize,
) -> Result<OdeSolution> {
    if !(delta >= 0.0 && delta < horizon) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= delta < T, got delta={delta}, T={horizon}"
        )));
    }
    if score_fn.dim() != p_init.dim() {
        return Err(Error::DimensionMismatch {
            expected: p_init.dim() as usize,
            got: score_fn.dim() as usize,
        });
    }
    let gen = ReverseGenerator::new(score_fn, horizon);
    let end = horizon - delta;
    let mut cuts = vec![0.0, end];
    let floor = delta.max(1e-6 * horizon);
    let mut s = horizon;
    while s > floor {
        s = (s / 1.5).max(floor);
        if horizon - s < end {
            cuts.push(horizon - s);
        }
    }
    cuts.extend(gen.breakpoints().into_iter().filter(|&b| b > 0.0 && b < end));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut p = p_init.mass().to_vec();
    let mut total_steps = 0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        // Evaluate strictly inside each piece so left-closed buckets of a
        // piecewise-constant score are read on the correct side.
        let eps = (b - a) * 1e-12;
        let steps = ((b - a) * steps_per_unit as f64).ceil().max(16.0) as usize;
        rk4_segment(&gen, &mut p, a + eps, b - eps, steps)?;
        total_steps += steps;
    }
    let drift = p.iter().sum::<f64>() - 1.0;
    Ok(OdeSolution {
        p,
        mass_drift: drift,
        steps: total_steps,
    })
}

/// One draw of `X_T` for a chain with generator `Q(t)` and `X_0 ~ p0`, by the
/// uniformization construction: `M ~ Poisson(λT)` sorted uniform ticks, and at
/// each tick a move `x → y` with probability `Q_{x,y}(τ)/λ`.
pub fn uniformize_generic<G, R>(gen: &G, lambda_bound: f64, p0: &[f64], horizon: f64, rng: &mut R) -> Result<usize>
where
    G: TimeGenerator + ?Sized,
    R: Rng + ?Sized,
{
    let initial = WeightedIndex::new(p0).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    uniformize_from(gen, lambda_bound, &initial, horizon, rng)
}

/// Like [`uniformize_generic`] with a prepared initial-state sampler.
pub fn uniformize_from<G, R>(
    gen: &G,
    lambda_bound: f64,
    initial: &WeightedIndex<f64>,
    horizon: f64,
    rng: &mut R,
) -> Result<usize>
where
    G: TimeGenerator + ?Sized,
    R: Rng + ?Sized,
{
    if !(lambda_bound > 0.0 && lambda_bound.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda bound must be positive, got {lambda_bound}"
        )));
    }
    if horizon.is_nan() || horizon < 0.0 {
        return Err(Error::NegativeTime(horizon));
    }
    let mut x = initial.sample(rng);
    let mean = lambda_bound * horizon;
    let m = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(rng) as usize
    } else {
        0
    };
    let mut ticks: Vec<f64> = (0..m).map(|_| horizon * rng.random::<f64>()).collect();
    ticks.sort_by(f64::total_cmp);
    for tau in ticks {
        let q = gen.generator_at(tau)?;
        let exit = -q.get(x, x);
        if exit > lambda_bound * (1.0 + 1e-12) {
            return Err(Error::RateBound {
                state: x as u64,
                time: tau,
                interval: 0,
                total_rate: exit,
                lambda: lambda_bound,
            });
        }
        let target = rng.random::<f64>() * lambda_bound;
        let mut cum = 0.0;
        for (y, &rate) in q.row(x).iter().enumerate() {
            if y == x {
                continue;
            }
            cum += rate;
            if target < cum {
                x = y;
                break;
            }
        }
    }
    Ok(x)
}
