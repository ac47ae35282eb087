//! Tabular score learning by denoising score entropy, and controlled score
//! perturbations.
//!
//! A [`ScoreTable`] stores `θ = ln s` for every (time bucket, state,
//! coordinate). For a pair `(t, X_0, X_t)` the loss contribution of cell
//! `(b(t), X_t, i)` is `e^θ - r_i θ`, with `r_i` the kernel ratio, so its
//! gradient is `e^θ - r_i` and the empirical minimizer of each cell is
//! `e^θ = mean r_i` over the pairs landing in it.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{score_envelope, HypercubeState, RatioMode};
use crate::losses::{dse_term, kernel_ratio, NoisedPair};
use crate::sampler::sample_forward_conditional;
use crate::score::{check_query, ScoreFn};

/// Largest dimension a table accepts (`B · 2^d · d` parameters).
pub const MAX_TABLE_DIM: u32 = 16;
pub const DEFAULT_BUCKETS: usize = 16;
pub const TABLE_FORMAT_VERSION: u32 = 1;
const TABLE_MAGIC: &[u8; 4] = b"HCST";

/// `buckets + 1` edges geometric in forward time from `δ` to `T`.
pub fn geometric_edges(delta: f64, horizon: f64, buckets: usize) -> Result<Vec<f64>> {
    if !(delta > 0.0 && horizon > delta && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "geometric buckets need 0 < delta < T, got delta={delta}, T={horizon}"
        )));
    }
    if buckets == 0 {
        return Err(Error::InvalidParameter("need at least one bucket".into()));
    }
    let ratio = (horizon / delta).ln() / buckets as f64;
    let mut edges: Vec<f64> = (0..=buckets).map(|b| delta * (ratio * b as f64).exp()).collect();
    edges[0] = delta;
    edges[buckets] = horizon;
    Ok(edges)
}

/// Index of the left-closed bucket `[e_b, e_{b+1})` holding `t`; the last
/// bucket also holds `T`.
fn bucket_index(edges: &[f64], t: f64) -> Option<usize> {
    let (lo, hi) = (edges[0], *edges.last()?);
    if !(t >= lo && t <= hi) {
        return None;
    }
    let b = edges.partition_point(|&e| e <= t);
    Some(b.saturating_sub(1).min(edges.len() - 2))
}

/// Piecewise-constant-in-time score with log-parameterized entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    dim: u32,
    edges: Vec<f64>,
    theta: Vec<f64>,
}

impl ScoreTable {
    pub fn new(dim: u32, edges: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_TABLE_DIM {
            return Err(Error::Dimension {
                dim,
                reason: "score tables support 1 <= d <= 16",
            });
        }
        if edges.len() < 2 || !edges.windows(2).all(|w| w[0] < w[1]) || !(edges[0] >= 0.0) {
            return Err(Error::InvalidParameter(
                "bucket edges must be nonnegative and strictly increasing".into(),
            ));
        }
        let expected = (edges.len() - 1) * (1usize << dim) * dim as usize;
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.exp().is_finite()) {
            return Err(Error::InvalidParameter("exp(theta) must be finite".into()));
        }
        Ok(Self { dim, edges, theta })
    }

    /// Every entry `ln s = log_value`.
    pub fn constant(dim: u32, edges: Vec<f64>, log_value: f64) -> Result<Self> {
        let n = (edges.len().max(1) - 1) * (1usize << dim.min(MAX_TABLE_DIM)) * dim as usize;
        Self::new(dim, edges, vec![log_value; n])
    }

    /// Tabulates `score_fn` at each bucket's geometric midpoint.
    pub fn from_score_fn<S: ScoreFn + ?Sized>(score_fn: &S, edges: Vec<f64>) -> Result<Self> {
        let dim = score_fn.dim();
        let mut table = Self::constant(dim, edges, 0.0)?;
        let mut s = vec![0.0; dim as usize];
        for b in 0..table.n_buckets() {
            let t = table.midpoint(b);
            for x in 0..1u64 << dim {
                score_fn.score_into(HypercubeState::new(x, dim)?, t, &mut s)?;
                let base = table.cell(b, x as usize, 0);
                for (i, &v) in s.iter().enumerate() {
                    if !(v > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "cannot tabulate nonpositive score {v}"
                        )));
                    }
                    table.theta[base + i] = v.ln();
                }
            }
        }
        Ok(table)
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn n_buckets(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Geometric midpoint of bucket `b` (arithmetic if it starts at 0).
    pub fn midpoint(&self, b: usize) -> f64 {
        let (lo, hi) = (self.edges[b], self.edges[b + 1]);
        if lo > 0.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * hi
        }
    }

    pub fn bucket_of(&self, t: f64) -> Result<usize> {
        bucket_index(&self.edges, t).ok_or(Error::TimeOutOfRange {
            t,
            lo: self.edges[0],
            hi: *self.edges.last().unwrap(),
        })
    }

    /// Flat index of `θ[b, x, 0]`.
    #[inline]
    pub fn cell(&self, bucket: usize, state: usize, coord: usize) -> usize {
        ((bucket << self.dim) + state) * self.dim as usize + coord
    }

    /// Binary form: magic `HCST`, `format_version: u32`, `d: u32`, `B: u32`,
    /// `B + 1` edges, then `θ` row-major over `(B, 2^d, d)`; all
    /// little-endian, floats as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.dim.to_le_bytes())?;
        w.write_all(&(self.n_buckets() as u32).to_le_bytes())?;
        for v in self.edges.iter().chain(&self.theta) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format("bad score table magic".into()));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut r)?;
        if version != TABLE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let dim = read_u32(&mut r)?;
        let buckets = read_u32(&mut r)? as usize;
        if dim == 0 || dim > MAX_TABLE_DIM || buckets == 0 {
            return Err(Error::Format(format!("bad table header d={dim} B={buckets}")));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = [0u8; 8];
            (0..n)
                .map(|_| {
                    r.read_exact(&mut buf)?;
                    Ok(f64::from_le_bytes(buf))
                })
                .collect()
        };
        let edges = read_f64s(buckets + 1)?;
        let theta = read_f64s(buckets * (1usize << dim) * dim as usize)?;
        Self::new(dim, edges, theta)
    }

    pub fn metadata(&self) -> TableMetadata {
        TableMetadata {
            format_version: TABLE_FORMAT_VERSION,
            d: self.dim,
            buckets: self.n_buckets(),
            edges: self.edges.clone(),
            layout: "theta[bucket][state][coord], little-endian f64".into(),
        }
    }
}

/// JSON sidecar describing a table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub format_version: u32,
    pub d: u32,
    pub buckets: usize,
    pub edges: Vec<f64>,
    pub layout: String,
}

/// A table answers score queries directly: `s = exp(θ[bucket(t), x, ·])`.
impl ScoreFn for ScoreTable {
    fn dim(&self) -> u32 {
        self.dim
    }

    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        check_query(self.dim, x, out)?;
        let base = self.cell(self.bucket_of(t)?, x.index(), 0);
        for (o, th) in out.iter_mut().zip(&self.theta[base..base + self.dim as usize]) {
            *o = th.exp();
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }
}

/// Draws `n` pairs with `t` log-uniform on `[δ, T]`, `X_0` from `data`, and
/// `X_t` from the forward kernel.
pub fn draw_noised_pairs<F, R>(mut data: F, n: usize, delta: f64, horizon: f64, rng: &mut R) -> Result<Vec<NoisedPair>>
where
    F: FnMut(&mut R) -> HypercubeState,
    R: Rng,
{
    if !(delta > 0.0 && horizon > delta) {
        return Err(Error::InvalidParameter(format!(
            "pairs need 0 < delta < T, got delta={delta}, T={horizon}"
        )));
    }
    let (lo, hi) = (delta.ln(), horizon.ln());
    (0..n)
        .map(|_| {
            let t = (lo + (hi - lo) * rng.random::<f64>()).exp().clamp(delta, horizon);
            let x0 = data(rng);
            let xt = sample_forward_conditional(x0, t, rng)?;
            Ok(NoisedPair { t, x0, xt })
        })
        .collect()
}

/// Mean DSE of a table over pairs.
pub fn dse_objective(table: &ScoreTable, pairs: &[NoisedPair]) -> Result<f64> {
    let mut s = vec![0.0; table.dim() as usize];
    let mut total = 0.0;
    for pair in pairs {
        table.score_into(pair.xt, pair.t, &mut s)?;
        total += dse_term(pair, &s)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Analytic gradient of [`dse_objective`] with respect to `θ`.
pub fn dse_gradient(table: &ScoreTable, pairs: &[NoisedPair]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; table.theta.len()];
    let scale = 1.0 / pairs.len().max(1) as f64;
    for pair in pairs {
        let base = table.cell(table.bucket_of(pair.t)?, pair.xt.index(), 0);
        let offset = pair.xt.xor(pair.x0);
        for i in 0..table.dim() {
            let c = base + i as usize;
            grad[c] += scale * (table.theta[c].exp() - kernel_ratio(offset.bit(i), pair.t));
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: u32,
    pub horizon: f64,
    pub delta: f64,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    pub seed: u64,
}

fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}

/// Adam on minibatches of the empirical DSE, learning rate decaying
/// geometrically from `learning_rate` to `final_learning_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            learning_rate: 0.05,
            final_learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_dse: f64,
    /// Empirical DSE at the empirical minimizer; `final_dse` minus this is the
    /// optimization gap.
    pub minimum_dse: f64,
    pub initial_dse: f64,
    pub iterations: usize,
    pub learning_rates: Vec<f64>,
    pub seed: u64,
    pub n_pairs: usize,
    /// Empirical DSE after each epoch.
    pub loss_trace: Vec<f64>,
    /// Per-bucket DSE after each epoch, `[epoch][bucket]`.
    pub bucket_loss_trace: Vec<Vec<f64>>,
    pub visited_cells: usize,
}

/// Per-cell sufficient statistics of the empirical DSE: visit count and sum
/// of kernel ratios.
struct CellStats {
    count: Vec<f64>,
    ratio_sum: Vec<f64>,
}

impl CellStats {
    fn collect(table: &ScoreTable, pairs: &[NoisedPair]) -> Result<Self> {
        let mut count = vec![0.0; table.theta.len()];
        let mut ratio_sum = vec![0.0; table.theta.len()];
        for pair in pairs {
            let base = table.cell(table.bucket_of(pair.t)?, pair.xt.index(), 0);
            let offset = pair.xt.xor(pair.x0);
            for i in 0..table.dim() {
                count[base + i as usize] += 1.0;
                ratio_sum[base + i as usize] += kernel_ratio(offset.bit(i), pair.t);
            }
        }
        Ok(Self { count, ratio_sum })
    }

    /// Mean DSE and its per-bucket split (each normalized by the total pair count).
    fn loss(&self, table: &ScoreTable, n_pairs: usize) -> (f64, Vec<f64>) {
        let per_bucket = (1usize << table.dim) * table.dim as usize;
        let mut buckets = vec![0.0; table.n_buckets()];
        for (c, &th) in table.theta.iter().enumerate() {
            if self.count[c] > 0.0 {
                buckets[c / per_bucket] += self.count[c] * th.exp() - self.ratio_sum[c] * th;
            }
        }
        let n = n_pairs.max(1) as f64;
        buckets.iter_mut().for_each(|b| *b /= n);
        (buckets.iter().sum(), buckets)
    }
}

/// Fits a table by minibatch Adam on the empirical DSE of `n_pairs` pairs.
pub fn train_tabular<F>(
    data: F,
    config: &TrainConfig,
    n_pairs: usize,
    sgd: &SgdParams,
) -> Result<(ScoreTable, TrainReport)>
where
    F: FnMut(&mut ChaCha8Rng) -> HypercubeState,
{
    if n_pairs == 0 {
        return Err(Error::InvalidParameter("need at least one training pair".into()));
    }
    if sgd.epochs == 0 || sgd.batch_size == 0 || !(sgd.learning_rate > 0.0) {
        return Err(Error::InvalidParameter(format!("bad optimizer settings {sgd:?}")));
    }
    let edges = geometric_edges(config.delta, config.horizon, config.buckets)?;
    let mut table = ScoreTable::constant(config.dim, edges, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pairs = draw_noised_pairs(data, n_pairs, config.delta, config.horizon, &mut rng)?;
    let stats = CellStats::collect(&table, &pairs)?;

    let minimizer: Vec<f64> = stats
        .count
        .iter()
        .zip(&stats.ratio_sum)
        .map(|(&n, &r)| if n > 0.0 { (r / n).ln() } else { 0.0 })
        .collect();
    let minimum_dse = {
        let best = ScoreTable {
            theta: minimizer,
            ..table.clone()
        };
        stats.loss(&best, n_pairs).0
    };
    let initial_dse = stats.loss(&table, n_pairs).0;

    let d = config.dim as usize;
    let n_batches = n_pairs.div_ceil(sgd.batch_size);
    let total_steps = sgd.epochs * n_batches;
    let decay = (sgd.final_learning_rate / sgd.learning_rate).ln() / total_steps.max(2) as f64;
    let mut m = vec![0.0; table.theta.len()];
    let mut v = vec![0.0; table.theta.len()];
    let mut grad = vec![0.0; table.theta.len()];
    let mut touched: Vec<usize> = Vec::new();
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut step = 0usize;
    let mut loss_trace = Vec::with_capacity(sgd.epochs);
    let mut bucket_loss_trace = Vec::with_capacity(sgd.epochs);
    let mut learning_rates = Vec::with_capacity(sgd.epochs);

    for epoch in 0..sgd.epochs {
        order.shuffle(&mut rng);
        learning_rates.push(sgd.learning_rate * (decay * step as f64).exp());
        for batch in order.chunks(sgd.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &j in batch {
                let pair = &pairs[j];
                let base = table.cell(table.bucket_of(pair.t)?, pair.xt.index(), 0);
                let offset = pair.xt.xor(pair.x0);
                for i in 0..d {
                    let c = base + i;
                    if grad[c] == 0.0 {
                        touched.push(c);
                    }
                    grad[c] += scale * (table.theta[c].exp() - kernel_ratio(offset.bit(i as u32), pair.t));
                }
            }
            step += 1;
            let lr = sgd.learning_rate * (decay * step as f64).exp();
            let bias1 = 1.0 - sgd.beta1.powi(step as i32);
            let bias2 = 1.0 - sgd.beta2.powi(step as i32);
            for &c in &touched {
                let g = grad[c];
                m[c] = sgd.beta1 * m[c] + (1.0 - sgd.beta1) * g;
                v[c] = sgd.beta2 * v[c] + (1.0 - sgd.beta2) * g * g;
                table.theta[c] -= lr * (m[c] / bias1) / ((v[c] / bias2).sqrt() + 1e-12);
                grad[c] = 0.0;
            }
            touched.clear();
        }
        let (loss, per_bucket) = stats.loss(&table, n_pairs);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: step, loss });
        }
        loss_trace.push(loss);
        bucket_loss_trace.push(per_bucket);
        let _ = epoch;
    }

    let report = TrainReport {
        final_dse: *loss_trace.last().unwrap(),
        minimum_dse,
        initial_dse,
        iterations: step,
        learning_rates,
        seed: config.seed,
        n_pairs,
        loss_trace,
        bucket_loss_trace,
        visited_cells: stats.count.iter().filter(|&&n| n > 0.0).count(),
    };
    Ok((table, report))
}

/// Effect of clamping a table's totals to `d · envelope(t)` on its DSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampReport {
    pub dse_before: f64,
    pub dse_after: f64,
    /// Mean over pairs of the score mass removed by the clamp.
    pub mass_removed: f64,
}

pub fn clamp_report(table: &ScoreTable, pairs: &[NoisedPair], mode: RatioMode) -> Result<ClampReport> {
    let d = table.dim() as usize;
    let mut s = vec![0.0; d];
    let (mut before, mut after, mut removed) = (0.0, 0.0, 0.0);
    for pair in pairs {
        table.score_into(pair.xt, pair.t, &mut s)?;
        before += dse_term(pair, &s)?;
        let cap = d as f64 * score_envelope(pair.t, mode)?;
        let total: f64 = s.iter().sum();
        if total > cap {
            removed += total - cap;
            s.iter_mut().for_each(|v| *v *= cap / total);
        }
        after += dse_term(pair, &s)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok(ClampReport {
        dse_before: before / n,
        dse_after: after / n,
        mass_removed: removed / n,
    })
}

/// A base score multiplied by fixed lognormal factors `exp(σ z)`, with `z`
/// a standard normal keyed by (state, coordinate, time bucket, seed).
#[derive(Debug, Clone)]
pub struct PerturbedScore<S> {
    base: S,
    sigma: f64,
    seed: u64,
    edges: Vec<f64>,
}

/// Perturbs `base` with noise level `σ`; times outside `edges` use the
/// nearest bucket.
pub fn perturb_score<S: ScoreFn>(base: S, noise_level: f64, seed: u64, edges: Vec<f64>) -> Result<PerturbedScore<S>> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise level must be nonnegative, got {noise_level}"
        )));
    }
    if edges.len() < 2 || !edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter(
            "perturbation buckets must be increasing".into(),
        ));
    }
    Ok(PerturbedScore {
        base,
        sigma: noise_level,
        seed,
        edges,
    })
}

impl<S> PerturbedScore<S> {
    fn bucket(&self, t: f64) -> usize {
        let last = self.edges.len() - 2;
        if t <= self.edges[0] {
            0
        } else if t >= self.edges[last + 1] {
            last
        } else {
            bucket_index(&self.edges, t).unwrap_or(last)
        }
    }

    /// ChaCha keyed directly by (seed, state, bucket); its stream yields the
    /// `d` normals of that state in coordinate order.
    fn noise_rng(&self, x: HypercubeState, bucket: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&x.bits().to_le_bytes());
        key[16..24].copy_from_slice(&(bucket as u64).to_le_bytes());
        key[24..28].copy_from_slice(&x.dim().to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

impl<S: ScoreFn> ScoreFn for PerturbedScore<S> {
    fn dim(&self) -> u32 {
        self.base.dim()
    }

    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        self.base.score_into(x, t, out)?;
        if self.sigma == 0.0 {
            return Ok(());
        }
        let mut rng = self.noise_rng(x, self.bucket(t));
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o *= (self.sigma * z).exp();
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.base.breakpoints();
        b.extend_from_slice(&self.edges[1..self.edges.len() - 1]);
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::{evolve_exact, DenseDistribution};
    use crate::losses::{path_kl, score_error, TimeWeighting};
    use crate::score::{ConstantScore, ExactScore};

    fn point_mass(d: u32) -> DenseDistribution {
        DenseDistribution::point_mass(HypercubeState::new(0, d).unwrap()).unwrap()
    }

    #[test]
    fn edges_and_bucket_lookup() {
        let edges = geometric_edges(0.01, 1.0, 2).unwrap();
        assert_eq!(edges[0], 0.01);
        assert!((edges[1] - 0.1).abs() < 1e-15);
        assert_eq!(edges[2], 1.0);
        let table = ScoreTable::constant(2, edges.clone(), 0.0).unwrap();
        assert_eq!(table.bucket_of(0.01).unwrap(), 0);
        assert_eq!(table.bucket_of(edges[1]).unwrap(), 1);
        assert_eq!(table.bucket_of(1.0).unwrap(), 1);
        assert!(matches!(table.bucket_of(1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(table.bucket_of(0.001).is_err());
        assert!(geometric_edges(0.0, 1.0, 4).is_err());
    }

    #[test]
    fn tabulated_exact_score_is_reproduced_at_midpoints() {
        let p0 = DenseDistribution::from_weights(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let exact = ExactScore::new(p0).unwrap();
        let table = ScoreTable::from_score_fn(&exact, geometric_edges(0.05, 4.0, 8).unwrap()).unwrap();
        for b in 0..8 {
            let t = table.midpoint(b);
            for x in 0..8 {
                let x = HypercubeState::new(x, 3).unwrap();
                let a = table.score(x, t).unwrap();
                let e = exact.score(x, t).unwrap();
                for (u, v) in a.as_slice().iter().zip(e.as_slice()) {
                    assert!((u - v).abs() <= 1e-14 * v, "{u} {v}");
                }
            }
        }
    }

    #[test]
    fn table_binary_round_trip() {
        let mut table = ScoreTable::constant(3, geometric_edges(0.1, 2.0, 4).unwrap(), 0.0).unwrap();
        table
            .theta_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin());
        let mut buf = Vec::new();
        table.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * (5 + 4 * 8 * 3));
        assert_eq!(ScoreTable::read_binary(&buf[..]).unwrap(), table);
        let meta = serde_json::to_string(&table.metadata()).unwrap();
        assert!(meta.contains("\"buckets\":4"));
        buf[0] = b'X';
        assert!(ScoreTable::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = 3;
        let cfg = TrainConfig {
            dim: d,
            horizon: 2.0,
            delta: 0.05,
            buckets: 4,
            seed: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p0 = DenseDistribution::from_weights(d, (1..=8).map(f64::from).collect()).unwrap();
        let sampler = p0.sampler().unwrap();
        let pairs = draw_noised_pairs(|r| sampler.sample(r), 500, cfg.delta, cfg.horizon, &mut rng).unwrap();
        let mut table = ScoreTable::constant(d, geometric_edges(0.05, 2.0, 4).unwrap(), 0.0).unwrap();
        table
            .theta_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let grad = dse_gradient(&table, &pairs).unwrap();
        let h = 1e-5;
        for (c, &g) in grad.iter().enumerate() {
            let mut plus = table.clone();
            plus.theta_mut()[c] += h;
            let mut minus = table.clone();
            minus.theta_mut()[c] -= h;
            let fd = (dse_objective(&plus, &pairs).unwrap() - dse_objective(&minus, &pairs).unwrap()) / (2.0 * h);
            let scale = g.abs().max(fd.abs());
            if scale > 0.0 {
                assert!((g - fd).abs() / scale < 1e-6, "cell {c}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn training_on_uniform_data_learns_ones() {
        let d = 3;
        let cfg = TrainConfig {
            dim: d,
            horizon: 3.0,
            delta: 0.05,
            buckets: 8,
            seed: 4,
        };
        let (table, report) = train_tabular(
            |r: &mut ChaCha8Rng| HypercubeState::random(d, r).unwrap(),
            &cfg,
            100_000,
            &SgdParams::default(),
        )
        .unwrap();
        // Uniform X_0 makes every cell's kernel ratio average to one; its
        // variance at time t is p coth² + (1 - p) tanh² - 1, p the flip probability.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pairs = draw_noised_pairs(
            |r| HypercubeState::random(d, r).unwrap(),
            100_000,
            cfg.delta,
            cfg.horizon,
            &mut rng,
        )
        .unwrap();
        let stats = CellStats::collect(&table, &pairs).unwrap();
        let per_bucket = (1usize << d) * d as usize;
        for (c, th) in table.theta().iter().enumerate() {
            let b = c / per_bucket;
            let t = table.edges()[b];
            let p = -0.5 * (-2.0 * t).exp_m1();
            let var = p / t.tanh().powi(2) + (1.0 - p) * t.tanh().powi(2) - 1.0;
            let se = (var / stats.count[c]).sqrt();
            assert!(
                (th.exp() - 1.0).abs() < 5.0 * se + 0.01,
                "cell {c}: s={} se={se}",
                th.exp()
            );
        }
        assert!(report.final_dse < report.initial_dse + 1e-12);
    }

    #[test]
    fn training_reduces_dse_and_trace_settles() {
        let d = 3;
        let cfg = TrainConfig {
            dim: d,
            horizon: 4.0,
            delta: 0.05,
            buckets: 16,
            seed: 9,
        };
        let zero = HypercubeState::new(0, d).unwrap();
        let (_, report) = train_tabular(|_: &mut ChaCha8Rng| zero, &cfg, 20_000, &SgdParams::default()).unwrap();
        assert!(report.final_dse - report.minimum_dse < report.initial_dse - report.minimum_dse);
        assert!(report.final_dse - report.minimum_dse < 1e-3);
        // Non-increasing once smoothed over windows of 5 epochs.
        let smooth: Vec<f64> = report
            .loss_trace
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        assert!(smooth.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{smooth:?}");
        assert_eq!(report.learning_rates.len(), 40);
    }

    #[test]
    fn training_rejects_bad_arguments() {
        let cfg = TrainConfig {
            dim: 3,
            horizon: 1.0,
            delta: 0.0,
            buckets: 4,
            seed: 0,
        };
        let zero = HypercubeState::new(0, 3).unwrap();
        assert!(train_tabular(|_: &mut ChaCha8Rng| zero, &cfg, 10, &SgdParams::default()).is_err());
        let cfg = TrainConfig { delta: 0.1, ..cfg };
        assert!(train_tabular(|_: &mut ChaCha8Rng| zero, &cfg, 0, &SgdParams::default()).is_err());
    }

    #[test]
    fn empirical_minimizer_matches_mean_kernel_ratio() {
        let d = 2;
        let cfg = TrainConfig {
            dim: d,
            horizon: 2.0,
            delta: 0.1,
            buckets: 4,
            seed: 3,
        };
        let p0 = DenseDistribution::new(d, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let sampler = p0.sampler().unwrap();
        let sgd = SgdParams {
            epochs: 80,
            ..SgdParams::default()
        };
        let (table, report) = train_tabular(|r: &mut ChaCha8Rng| sampler.sample(r), &cfg, 20_000, &sgd).unwrap();
        assert!(report.final_dse - report.minimum_dse < 1e-4, "{report:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pairs = draw_noised_pairs(|r| sampler.sample(r), 20_000, cfg.delta, cfg.horizon, &mut rng).unwrap();
        let stats = CellStats::collect(&table, &pairs).unwrap();
        for c in 0..table.theta().len() {
            if stats.count[c] >= 200.0 {
                let target = stats.ratio_sum[c] / stats.count[c];
                let got = table.theta()[c].exp();
                assert!((got - target).abs() < 0.02 * target, "cell {c}: {got} vs {target}");
            }
        }
    }

    #[test]
    fn clamping_a_trained_table_does_not_raise_dse_beyond_removed_mass() {
        let d = 3;
        let cfg = TrainConfig {
            dim: d,
            horizon: 3.0,
            delta: 0.05,
            buckets: 8,
            seed: 5,
        };
        let zero = HypercubeState::new(0, d).unwrap();
        let (mut table, _) = train_tabular(|_: &mut ChaCha8Rng| zero, &cfg, 20_000, &SgdParams::default()).unwrap();
        // Inflate a few entries so the clamp has something to remove.
        for c in (0..table.theta().len()).step_by(7) {
            table.theta_mut()[c] += 4.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pairs = draw_noised_pairs(|_| zero, 5_000, cfg.delta, cfg.horizon, &mut rng).unwrap();
        let r = clamp_report(&table, &pairs, RatioMode::General).unwrap();
        assert!(r.mass_removed > 0.0);
        assert!(r.dse_after - r.dse_before <= r.mass_removed, "{r:?}");
    }

    #[test]
    fn zero_noise_perturbation_is_identity() {
        let exact = ExactScore::new(point_mass(3)).unwrap();
        let edges = geometric_edges(0.05, 3.0, 16).unwrap();
        let same = perturb_score(exact.clone(), 0.0, 1, edges.clone()).unwrap();
        let noisy = perturb_score(exact.clone(), 0.3, 1, edges).unwrap();
        let x = HypercubeState::new(0b011, 3).unwrap();
        assert_eq!(same.score(x, 0.4).unwrap(), exact.score(x, 0.4).unwrap());
        assert_ne!(noisy.score(x, 0.4).unwrap(), exact.score(x, 0.4).unwrap());
        // A fixed function of its inputs.
        assert_eq!(noisy.score(x, 0.4).unwrap(), noisy.score(x, 0.4).unwrap());
        assert!(perturb_score(ConstantScore::ones(3), -0.1, 0, vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn perturbation_factors_are_lognormal() {
        let edges = vec![0.0, 1.0];
        let sigma = 0.5;
        let noisy = perturb_score(ConstantScore::ones(12), sigma, 3, edges).unwrap();
        let logs: Vec<f64> = (0..2000u64)
            .flat_map(|x| {
                noisy
                    .score(HypercubeState::new(x, 12).unwrap(), 0.5)
                    .unwrap()
                    .into_inner()
            })
            .map(f64::ln)
            .collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * sigma / n.sqrt());
        assert!((var.sqrt() - sigma).abs() < 0.02);
    }

    #[test]
    fn score_error_grows_with_noise_level() {
        let d = 4;
        let p0 = DenseDistribution::from_weights(d, (1..=16).map(f64::from).collect()).unwrap();
        let exact = ExactScore::new(p0.clone()).unwrap();
        let (horizon, delta) = (4.0, 0.05);
        let edges = geometric_edges(delta, horizon, 16).unwrap();
        let g = evolve_exact(&p0, horizon).unwrap();
        let mut last = 0.0;
        for sigma in [0.05, 0.1, 0.2] {
            let noisy = perturb_score(exact.clone(), sigma, 11, edges.clone()).unwrap();
            let v = path_kl(&p0, &noisy, horizon, delta, &g, 33).unwrap().value;
            assert!(v > last, "sigma {sigma}: {v} <= {last}");
            last = v;
            let uni = score_error(&p0, &noisy, horizon, delta, TimeWeighting::Uniform, 33).unwrap();
            let log = score_error(&p0, &noisy, horizon, delta, TimeWeighting::LogUniform, 33).unwrap();
            assert!((uni * (horizon - delta) - v).abs() < 1e-10);
            assert!(log > 0.0);
        }
    }
}
