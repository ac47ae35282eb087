//! Exact reverse-time sampling by uniformization.
//!
//! The reverse clock `τ` runs over `[0, T - δ]` and is cut into intervals
//! `0 = t_0 < ... < t_N = T - δ`. On interval `k` a Poisson clock of rate
//! `λ_k` dominates every exit rate `Σ_i s_x(T - τ)_i`. At each clock tick the
//! chain moves to `x + e_i` with probability `s_x(T - τ)_i / λ_k` and stays
//! put otherwise, which reproduces the law of the time-inhomogeneous CTMC
//! with generator `x → x + e_i` at rate `s_x(T - τ)_i` without any
//! discretization error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{flip_probability, score_envelope, HypercubeState, RatioMode, MAX_STATE_DIM};
use crate::score::ScoreFn;

/// Relative slack allowed on the rate bound before a tick is rejected.
pub const RATE_SLACK: f64 = 1e-12;

fn default_partition_c() -> f64 {
    1.0
}

fn default_rate_c() -> f64 {
    2.0
}

fn default_mode() -> RatioMode {
    RatioMode::General
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub dim: u32,
    /// Forward horizon `T`.
    pub horizon: f64,
    /// Early-stopping time `δ`.
    pub delta: f64,
    /// Partition constant `c`: `t_{k+1} - t_k <= c (T - t_{k+1})`.
    #[serde(default = "default_partition_c")]
    pub partition_c: f64,
    /// Rate constant `C`: the bounded-mode tail interval runs at `C d L`.
    /// Unused in general mode.
    #[serde(default = "default_rate_c")]
    pub rate_c: f64,
    #[serde(default = "default_mode")]
    pub mode: RatioMode,
    pub seed: u64,
    pub n_samples: usize,
}

impl SamplerConfig {
    pub fn new(dim: u32, horizon: f64, delta: f64) -> Self {
        Self {
            dim,
            horizon,
            delta,
            partition_c: default_partition_c(),
            rate_c: default_rate_c(),
            mode: RatioMode::General,
            seed: 0,
            n_samples: 1,
        }
    }

    pub fn with_mode(mut self, mode: RatioMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_STATE_DIM {
            return Err(Error::Dimension {
                dim: self.dim,
                reason: "sampler dimension must lie in 1..=63",
            });
        }
        self.mode.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.delta >= 0.0) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.horizon.is_finite() && self.horizon > self.delta) {
            return bad(format!(
                "horizon must be finite and exceed delta, got T={} delta={}",
                self.horizon, self.delta
            ));
        }
        if self.delta == 0.0 && self.mode == RatioMode::General {
            return bad("delta = 0 needs a ratio bound (bounded mode); rates are unbounded".into());
        }
        if !(self.partition_c.is_finite() && self.partition_c > 0.0) {
            return bad(format!(
                "partition constant c must be positive, got {}",
                self.partition_c
            ));
        }
        if !(self.rate_c.is_finite() && self.rate_c >= 1.0) {
            return bad(format!("rate constant C must be at least 1, got {}", self.rate_c));
        }
        Ok(())
    }
}

/// Reverse-time grid `0 = t_0 < ... < t_N = T - δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePartition {
    pub times: Vec<f64>,
    pub c: f64,
    pub horizon: f64,
    pub delta: f64,
    /// Bounded mode: the last interval covers forward times below `1/L`, where
    /// the ratio bound replaces the geometric refinement.
    pub bounded_tail: bool,
}

impl TimePartition {
    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.times[k], self.times[k + 1])
    }

    pub fn is_tail(&self, k: usize) -> bool {
        self.bounded_tail && k + 1 == self.n_intervals()
    }

    /// Checks `t_{k+1} - t_k <= c (T - t_{k+1})` on every non-tail interval.
    pub fn satisfies_step_rule(&self) -> bool {
        // Times are stored as `T - s`, so each carries rounding of order ε T.
        let slack = 8.0 * f64::EPSILON * self.horizon * (1.0 + self.c);
        (0..self.n_intervals()).filter(|&k| !self.is_tail(k)).all(|k| {
            let (a, b) = self.interval(k);
            b - a <= self.c * (self.horizon - b) + slack
        })
    }
}

/// Geometric grid in remaining forward time: `s_{k+1} = max(floor, s_k / (1 + c))`
/// from `s_0 = T`, with `floor = δ` in general mode. In bounded mode the grid
/// stops at `max(δ, 1/L)` and, when `δ < 1/L`, one tail interval reaches
/// `T - δ`.
pub fn build_partition(config: &SamplerConfig) -> Result<TimePartition> {
    config.validate()?;
    let (horizon, delta, c) = (config.horizon, config.delta, config.partition_c);
    let floor = match config.mode {
        RatioMode::General => delta,
        RatioMode::Bounded(l) => delta.max(1.0 / l),
    };
    let mut times = vec![0.0];
    let mut bounded_tail = false;
    if floor >= horizon {
        times.push(horizon - delta);
        bounded_tail = matches!(config.mode, RatioMode::Bounded(_));
    } else {
        let mut s = horizon;
        while s > floor {
            s = (s / (1.0 + c)).max(floor);
            times.push(horizon - s);
        }
        if floor > delta {
            times.push(horizon - delta);
            bounded_tail = true;
        }
    }
    Ok(TimePartition {
        times,
        c,
        horizon,
        delta,
        bounded_tail,
    })
}

/// Per-interval Poisson rates and their integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambdas: Vec<f64>,
    /// `Σ_k λ_k (t_{k+1} - t_k)`: the mean number of clock ticks.
    pub total_mass: f64,
}

/// `λ_k = d · envelope(T - t_{k+1})`, the envelope read at the interval's
/// right end where it is largest; the bounded-mode tail gets `C d L`.
pub fn build_lambda_schedule(partition: &TimePartition, config: &SamplerConfig) -> Result<LambdaSchedule> {
    config.validate()?;
    let d = config.dim as f64;
    let mut lambdas = Vec::with_capacity(partition.n_intervals());
    let mut total_mass = 0.0;
    for k in 0..partition.n_intervals() {
        let (a, b) = partition.interval(k);
        let lambda = match (partition.is_tail(k), config.mode) {
            (true, RatioMode::Bounded(l)) => config.rate_c * d * l,
            _ => d * score_envelope(partition.horizon - b, config.mode)?,
        };
        total_mass += lambda * (b - a);
        lambdas.push(lambda);
    }
    Ok(LambdaSchedule { lambdas, total_mass })
}

/// Wraps a score so its per-state total never exceeds `d · envelope(t)`;
/// totals above the cap are scaled down proportionally.
#[derive(Debug, Clone)]
pub struct ClampedScore<S> {
    inner: S,
    mode: RatioMode,
}

pub fn clamp_score<S: ScoreFn>(score_fn: S, config: &SamplerConfig) -> ClampedScore<S> {
    ClampedScore {
        inner: score_fn,
        mode: config.mode,
    }
}

impl<S> ClampedScore<S> {
    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: ScoreFn> ScoreFn for ClampedScore<S> {
    fn dim(&self) -> u32 {
        self.inner.dim()
    }

    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        self.inner.score_into(x, t, out)?;
        let cap = self.dim() as f64 * score_envelope(t, self.mode)?;
        let total: f64 = out.iter().sum();
        if total > cap {
            let scale = cap / total;
            out.iter_mut().for_each(|o| *o *= scale);
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.inner.breakpoints()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub n_events: u64,
    pub n_flips: u64,
    pub per_interval_events: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseSample {
    pub state: HypercubeState,
    pub stats: TrajectoryStats,
}

/// Clock ticks of one trajectory, grouped by interval and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTimes(pub Vec<Vec<f64>>);

/// Per-trajectory RNG: ChaCha8 keyed by `seed` on stream `index`, so batches
/// are reproducible regardless of order or thread count.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The uniformization sampler for one configuration.
#[derive(Debug, Clone)]
pub struct ReverseSampler {
    config: SamplerConfig,
    partition: TimePartition,
    schedule: LambdaSchedule,
}

impl ReverseSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        let partition = build_partition(&config)?;
        let schedule = build_lambda_schedule(&partition, &config)?;
        Ok(Self {
            config,
            partition,
            schedule,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn partition(&self) -> &TimePartition {
        &self.partition
    }

    pub fn schedule(&self) -> &LambdaSchedule {
        &self.schedule
    }

    /// Draws `M_k ~ Poisson(λ_k Δ_k)` ticks per interval, each a sorted set of
    /// uniforms on the interval.
    pub fn draw_event_times<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EventTimes> {
        let mut out = Vec::with_capacity(self.partition.n_intervals());
        for (k, &lambda) in self.schedule.lambdas.iter().enumerate() {
            let (a, b) = self.partition.interval(k);
            let mean = lambda * (b - a);
            let m = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::InvalidParameter(format!("Poisson mean {mean}: {e}")))?
                    .sample(rng) as usize
            } else {
                0
            };
            let mut ticks: Vec<f64> = (0..m).map(|_| a + (b - a) * rng.random::<f64>()).collect();
            ticks.sort_by(f64::total_cmp);
            out.push(ticks);
        }
        Ok(EventTimes(out))
    }

    /// Runs the jump chain from `start` through fixed clock ticks.
    ///
    /// At a tick in interval `k` a single uniform `u ∈ [0, 1)` selects
    /// coordinate `i` when `u λ_k` falls strictly below the running sum
    /// `s_1 + ... + s_i`; coordinates with zero rate are therefore never
    /// chosen, and `u λ_k` beyond the full sum means "stay".
    pub fn run_given_times<S, R>(
        &self,
        start: HypercubeState,
        times: &EventTimes,
        score_fn: &S,
        rng: &mut R,
    ) -> Result<(HypercubeState, TrajectoryStats)>
    where
        S: ScoreFn + ?Sized,
        R: Rng + ?Sized,
    {
        let d = self.config.dim as usize;
        if score_fn.dim() as usize != d || start.dim() as usize != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: score_fn.dim() as usize,
            });
        }
        let mut rates = vec![0.0; d];
        let mut z = start;
        let mut stats = TrajectoryStats {
            per_interval_events: Vec::with_capacity(times.0.len()),
            ..Default::default()
        };
        for (k, ticks) in times.0.iter().enumerate() {
            let lambda = self.schedule.lambdas[k];
            for &tau in ticks {
                score_fn.score_into(z, self.config.horizon - tau, &mut rates)?;
                let total: f64 = rates.iter().sum();
                if !(total <= lambda * (1.0 + RATE_SLACK)) {
                    return Err(Error::RateBound {
                        state: z.bits(),
                        time: tau,
                        interval: k,
                        total_rate: total,
                        lambda,
                    });
                }
                let target = rng.random::<f64>() * lambda;
                let mut cum = 0.0;
                for (i, &r) in rates.iter().enumerate() {
                    cum += r;
                    if target < cum {
                        z = z.flip(i as u32);
                        stats.n_flips += 1;
                        break;
                    }
                }
            }
            stats.n_events += ticks.len() as u64;
            stats.per_interval_events.push(ticks.len() as u32);
        }
        Ok((z, stats))
    }

    /// One trajectory: `Y_0 ~ Unif({0,1}^d)`, then the uniformized jump chain
    /// up to reverse time `T - δ`.
    pub fn sample_one<S, R>(&self, score_fn: &S, rng: &mut R) -> Result<ReverseSample>
    where
        S: ScoreFn + ?Sized,
        R: Rng + ?Sized,
    {
        let start = HypercubeState::random(self.config.dim, rng)?;
        let times = self.draw_event_times(rng)?;
        let (state, stats) = self.run_given_times(start, &times, score_fn, rng)?;
        Ok(ReverseSample { state, stats })
    }

    /// `config.n_samples` trajectories in parallel on the current rayon pool;
    /// trajectory `i` uses [`trajectory_rng`]`(seed, i)`.
    pub fn sample_batch<S: ScoreFn + ?Sized>(&self, score_fn: &S) -> Result<Vec<ReverseSample>> {
        self.sample_range(score_fn, 0, self.config.n_samples as u64)
    }

    pub fn sample_range<S: ScoreFn + ?Sized>(
        &self,
        score_fn: &S,
        first: u64,
        count: u64,
    ) -> Result<Vec<ReverseSample>> {
        (first..first + count)
            .into_par_iter()
            .map(|i| {
                let mut rng = trajectory_rng(self.config.seed, i);
                self.sample_one(score_fn, &mut rng)
            })
            .collect()
    }
}

/// One draw of `X_t` given `X_0 = x0`: each coordinate flips independently
/// with probability `(1 - e^{-2t}) / 2`.
pub fn sample_forward_conditional<R: Rng + ?Sized>(x0: HypercubeState, t: f64, rng: &mut R) -> Result<HypercubeState> {
    let p = flip_probability(t)?;
    let mut x = x0;
    for i in 0..x0.dim() {
        if rng.random::<f64>() < p {
            x = x.flip(i);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub time: f64,
    pub coord: u32,
    pub state: HypercubeState,
}

/// Runs the forward CTMC on `[0, t_max]`: `d` independent rate-1 flip clocks,
/// simulated as one rate-`d` clock with a uniformly chosen coordinate.
pub fn sample_forward_path<R: Rng + ?Sized>(x0: HypercubeState, t_max: f64, rng: &mut R) -> Result<Vec<FlipEvent>> {
    if t_max.is_nan() || t_max < 0.0 {
        return Err(Error::NegativeTime(t_max));
    }
    let d = x0.dim();
    let gap = Exp::new(d as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut x = x0;
    loop {
        t += gap.sample(rng);
        if t > t_max {
            break;
        }
        let coord = rng.random_range(0..d);
        x = x.flip(coord);
        events.push(FlipEvent {
            time: t,
            coord,
            state: x,
        });
    }
    Ok(events)
}
