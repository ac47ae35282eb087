//! Score-entropy losses.
//!
//! The per-state loss is the Bregman divergence of the entropy generator
//! `h(x) = Σ x_i ln x_i`:
//!
//! ```text
//! ℓ(c, s) = Σ_i ( -c_i + s_i + c_i ln(c_i / s_i) )
//! ```
//!
//! Its time integral under the forward marginals, plus the terminal mismatch
//! `KL(p(T) || γ)`, is the KL divergence between the true reverse path
//! measure and the one driven by `s` ([`path_kl`]). The implicit and denoising
//! score entropies ([`ise_estimate`], [`dse_estimate`]) are Monte-Carlo
//! objectives equal to that integral up to score-independent terms.
//!
//! Infinite values are returned as `f64::INFINITY` and flagged in the report,
//! never as NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{evolve_exact, exact_score, kl, DenseDistribution, HypercubeState};
use crate::score::ScoreFn;

/// Default number of quadrature nodes per smooth segment.
pub const DEFAULT_QUAD_NODES: usize = 129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ExactQuadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub n_states_visited: usize,
    pub time_points: Vec<f64>,
    pub estimator: Estimator,
    /// Terminal term `KL(p(T) || γ_init)` (quadrature reports only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub terminal_kl: Option<f64>,
    /// Time integral of the expected Bregman loss (quadrature reports only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub integral: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// Samples (or quadrature nodes) whose contribution was infinite.
    pub n_infinite: usize,
    /// Set when the value is not a finite number.
    pub flagged: bool,
}

impl LossReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `ℓ(c, s)`; `+inf` when some `s_i = 0 < c_i`.
pub fn bregman(c: &[f64], s: &[f64]) -> Result<f64> {
    if c.len() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: c.len(),
            got: s.len(),
        });
    }
    let mut acc = 0.0;
    for (&ci, &si) in c.iter().zip(s) {
        if !(ci >= 0.0 && si >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Bregman arguments must be nonnegative, got c={ci}, s={si}"
            )));
        }
        if ci == 0.0 {
            acc += si;
        } else if si == 0.0 {
            return Ok(f64::INFINITY);
        } else {
            acc += -ci + si + ci * (ci / si).ln();
        }
    }
    // Cancellation can leave a tiny negative residue when s ≈ c.
    Ok(acc.max(0.0))
}

/// `E_{x ~ p_t} ℓ(c_x(t), s_x(t))`, with `p_t` the forward marginal at `t`.
///
/// Every neighbour rate of the forward generator is one, so no rate weights
/// appear.
pub fn expected_loss_at<S: ScoreFn + ?Sized>(p_t: &DenseDistribution, score_fn: &S, t: f64) -> Result<f64> {
    Ok(expected_loss_counted(p_t, score_fn, t)?.0)
}

fn expected_loss_counted<S: ScoreFn + ?Sized>(p_t: &DenseDistribution, score_fn: &S, t: f64) -> Result<(f64, usize)> {
    if score_fn.dim() != p_t.dim() {
        return Err(Error::DimensionMismatch {
            expected: p_t.dim() as usize,
            got: score_fn.dim() as usize,
        });
    }
    let mut s = vec![0.0; p_t.dim() as usize];
    let mut acc = 0.0;
    let mut visited = 0;
    for x in p_t.states() {
        let px = p_t.prob(x);
        if px <= 0.0 {
            continue;
        }
        visited += 1;
        let c = exact_score(p_t, x)?;
        score_fn.score_into(x, t, &mut s)?;
        acc += px * bregman(c.as_slice(), &s)?;
    }
    Ok((acc, visited))
}

/// Path KL between the true reverse process on `[δ, T]` and the one driven by
/// `score_fn` started from `gamma_init`:
///
/// `KL(p(T) || γ_init) + ∫_δ^T E_{p(t)} ℓ(c(t), s(t)) dt`.
///
/// The integral splits `[δ, T]` at `t = 1` and at the score's breakpoints.
/// Segments below `t = 1` use Simpson's rule in `ln t` (the integrand scales
/// like `1/t` there), the rest uniform Simpson; each segment gets `n_quad`
/// nodes (rounded up to odd).
pub fn path_kl<S: ScoreFn + ?Sized>(
    p0: &DenseDistribution,
    score_fn: &S,
    horizon: f64,
    delta: f64,
    gamma_init: &DenseDistribution,
    n_quad: usize,
) -> Result<LossReport> {
    if !(delta >= 0.0 && delta < horizon && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= delta < T, got delta={delta}, T={horizon}"
        )));
    }
    if n_quad < 2 {
        return Err(Error::InvalidParameter("n_quad must be at least 2".into()));
    }
    let nodes = if n_quad % 2 == 1 { n_quad } else { n_quad + 1 };

    let p_end = evolve_exact(p0, horizon)?;
    let terminal = kl(&p_end, gamma_init)?;

    let acc = integrate_expected_loss(p0, score_fn, delta, horizon, nodes, |_| 1.0)?;
    let integral = acc.integral;
    let value = terminal + integral;
    Ok(LossReport {
        value: if value.is_finite() { value } else { f64::INFINITY },
        n_states_visited: acc.visited,
        time_points: acc.time_points,
        estimator: Estimator::ExactQuadrature,
        terminal_kl: Some(terminal),
        integral: Some(integral),
        n_samples: None,
        seed: None,
        n_infinite: acc.n_infinite,
        flagged: !value.is_finite(),
    })
}

struct QuadratureSum {
    integral: f64,
    time_points: Vec<f64>,
    n_infinite: usize,
    visited: usize,
}

/// `∫_δ^T w(t) E_{p(t)} ℓ(c(t), s(t)) dt` on the split Simpson grid.
fn integrate_expected_loss<S: ScoreFn + ?Sized>(
    p0: &DenseDistribution,
    score_fn: &S,
    delta: f64,
    horizon: f64,
    nodes: usize,
    weight: impl Fn(f64) -> f64,
) -> Result<QuadratureSum> {
    let mut cuts = vec![delta, horizon];
    if delta < 1.0 && 1.0 < horizon {
        cuts.push(1.0);
    }
    cuts.extend(score_fn.breakpoints().into_iter().filter(|&b| b > delta && b < horizon));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut out = QuadratureSum {
        integral: 0.0,
        time_points: Vec::new(),
        n_infinite: 0,
        visited: 0,
    };
    for w in cuts.windows(2) {
        for (t, q) in segment_rule(w[0], w[1], nodes) {
            let p_t = evolve_exact(p0, t)?;
            let (f, v) = expected_loss_counted(&p_t, score_fn, t)?;
            out.visited = out.visited.max(v);
            if !f.is_finite() {
                out.n_infinite += 1;
            }
            out.integral += q * weight(t) * f;
            out.time_points.push(t);
        }
    }
    Ok(out)
}

/// How score errors are averaged over forward time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    /// `1/(T - δ) ∫_δ^T ... dt`.
    Uniform,
    /// `1/ln(T/δ) ∫_δ^T ... dt/t`, the law training times are drawn from.
    LogUniform,
}

/// Average expected Bregman loss `ε` of `score_fn` over `[δ, T]`.
pub fn score_error<S: ScoreFn + ?Sized>(
    p0: &DenseDistribution,
    score_fn: &S,
    horizon: f64,
    delta: f64,
    weighting: TimeWeighting,
    n_quad: usize,
) -> Result<f64> {
    if !(delta >= 0.0 && delta < horizon && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= delta < T, got delta={delta}, T={horizon}"
        )));
    }
    if weighting == TimeWeighting::LogUniform && delta == 0.0 {
        return Err(Error::InvalidParameter("log-uniform weighting needs delta > 0".into()));
    }
    let nodes = (n_quad.max(3)) | 1;
    let acc = match weighting {
        TimeWeighting::Uniform => integrate_expected_loss(p0, score_fn, delta, horizon, nodes, |_| 1.0)?,
        TimeWeighting::LogUniform => integrate_expected_loss(p0, score_fn, delta, horizon, nodes, |t| 1.0 / t)?,
    };
    let norm = match weighting {
        TimeWeighting::Uniform => horizon - delta,
        TimeWeighting::LogUniform => (horizon / delta).ln(),
    };
    Ok(acc.integral / norm)
}

/// Nodes and weights for `∫_a^b f(t) dt` on one smooth segment. Endpoints are
/// nudged inward by a relative 1e-12 so piecewise-constant scores are read on
/// the segment's own side of a breakpoint.
fn segment_rule(a: f64, b: f64, nodes: usize) -> Vec<(f64, f64)> {
    let m = nodes - 1;
    let simpson = |k: usize| -> f64 {
        if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let lo = a + (b - a) * 1e-12;
    let hi = b - (b - a) * 1e-12;
    let mut out = Vec::with_capacity(nodes);
    if a == 0.0 {
        // t = b v^2 clusters nodes near the origin.
        let h = 1.0 / m as f64;
        for k in 0..=m {
            let v = k as f64 * h;
            let t = (b * v * v).clamp(lo, hi);
            out.push((t, simpson(k) * h / 3.0 * 2.0 * b * v));
        }
    } else if b <= 1.0 {
        let (ua, ub) = (a.ln(), b.ln());
        let h = (ub - ua) / m as f64;
        for k in 0..=m {
            let t = (ua + k as f64 * h).exp();
            out.push((t.clamp(lo, hi), simpson(k) * h / 3.0 * t));
        }
    } else {
        let h = (b - a) / m as f64;
        for k in 0..=m {
            let t = a + k as f64 * h;
            out.push((t.clamp(lo, hi), simpson(k) * h / 3.0));
        }
    }
    out
}

/// A forward-process draw `(t, X_0, X_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisedPair {
    pub t: f64,
    pub x0: HypercubeState,
    pub xt: HypercubeState,
}

/// `p(X_0 → x_t + e_i) / p(X_0 → x_t)` at forward time `t`: the heat-kernel
/// quotient reduces to a single coordinate, `tanh t` if that coordinate of
/// `x_t - X_0` is 0 and `coth t` if it is 1.
#[inline]
pub fn kernel_ratio(offset_bit: bool, t: f64) -> f64 {
    let th = t.tanh();
    if offset_bit {
        1.0 / th
    } else {
        th
    }
}

fn monte_carlo_report(
    total: f64,
    n_finite: usize,
    n_infinite: usize,
    times: Vec<f64>,
    visited: usize,
    seed: Option<u64>,
) -> LossReport {
    let n = n_finite + n_infinite;
    let value = if n_infinite > 0 || n == 0 {
        f64::INFINITY
    } else {
        total / n as f64
    };
    LossReport {
        value,
        n_states_visited: visited,
        time_points: times,
        estimator: Estimator::MonteCarlo,
        terminal_kl: None,
        integral: None,
        n_samples: Some(n),
        seed,
        n_infinite,
        flagged: !value.is_finite(),
    }
}

fn distinct_states(states: impl Iterator<Item = u64>) -> usize {
    let mut v: Vec<u64> = states.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Implicit score entropy: average over samples `(t, X_t)` of
/// `Σ_i ( s_{X_t}(t)_i - ln s_{X_t + e_i}(t)_i )`.
///
/// The log term reads the score at the neighbour `Y = X_t + e_i` in the
/// direction back to `X_t`.
pub fn ise_estimate<S: ScoreFn + ?Sized>(
    samples: &[(f64, HypercubeState)],
    score_fn: &S,
    seed: Option<u64>,
) -> Result<LossReport> {
    let d = score_fn.dim() as usize;
    let mut here = vec![0.0; d];
    let mut there = vec![0.0; d];
    let (mut total, mut n_finite, mut n_infinite) = (0.0, 0, 0);
    for &(t, x) in samples {
        score_fn.score_into(x, t, &mut here)?;
        let mut term: f64 = here.iter().sum();
        for i in 0..d {
            score_fn.score_into(x.flip(i as u32), t, &mut there)?;
            let back = there[i];
            if back <= 0.0 {
                term = f64::INFINITY;
                break;
            }
            term -= back.ln();
        }
        if term.is_finite() {
            total += term;
            n_finite += 1;
        } else {
            n_infinite += 1;
        }
    }
    Ok(monte_carlo_report(
        total,
        n_finite,
        n_infinite,
        samples.iter().map(|s| s.0).collect(),
        distinct_states(samples.iter().map(|s| s.1.bits())),
        seed,
    ))
}

/// Per-sample denoising score entropy integrand
/// `Σ_i ( s_{X_t}(t)_i - r_i ln s_{X_t}(t)_i )` with `r_i` the kernel ratio.
pub fn dse_term(pair: &NoisedPair, s: &[f64]) -> Result<f64> {
    if !(pair.t > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "denoising pairs need t > 0, got {}",
            pair.t
        )));
    }
    let offset = pair.xt.xor(pair.x0);
    let mut term = 0.0;
    for (i, &si) in s.iter().enumerate() {
        if si <= 0.0 {
            return Ok(f64::INFINITY);
        }
        term += si - kernel_ratio(offset.bit(i as u32), pair.t) * si.ln();
    }
    Ok(term)
}

/// Denoising score entropy averaged over `(t, X_0, X_t)` samples.
pub fn dse_estimate<S: ScoreFn + ?Sized>(
    samples: &[NoisedPair],
    score_fn: &S,
    seed: Option<u64>,
) -> Result<LossReport> {
    let mut s = vec![0.0; score_fn.dim() as usize];
    let (mut total, mut n_finite, mut n_infinite) = (0.0, 0, 0);
    for pair in samples {
        score_fn.score_into(pair.xt, pair.t, &mut s)?;
        let term = dse_term(pair, &s)?;
        if term.is_finite() {
            total += term;
            n_finite += 1;
        } else {
            n_infinite += 1;
        }
    }
    Ok(monte_carlo_report(
        total,
        n_finite,
        n_infinite,
        samples.iter().map(|s| s.t).collect(),
        distinct_states(samples.iter().map(|s| s.xt.bits())),
        seed,
    ))
}
