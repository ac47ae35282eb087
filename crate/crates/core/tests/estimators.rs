mod common;

use common::random_law;
use cubediff::hypercube::{evolve_exact, kl, DenseDistribution, HypercubeState};
use cubediff::losses::{
    dse_estimate, dse_term, expected_loss_at, ise_estimate, path_kl, NoisedPair, DEFAULT_QUAD_NODES,
};
use cubediff::oracle::reverse_marginal;
use cubediff::score::{ExactScore, ScoreFn};
use cubediff::train::{draw_noised_pairs, geometric_edges, perturb_score};
use cubediff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Scaled<S>(S, f64);

impl<S: ScoreFn> ScoreFn for Scaled<S> {
    fn dim(&self) -> u32 {
        self.0.dim()
    }
    fn score_into(&self, x: HypercubeState, t: f64, out: &mut [f64]) -> Result<()> {
        self.0.score_into(x, t, out)?;
        out.iter_mut().for_each(|v| *v *= self.1);
        Ok(())
    }
}

/// `∫ f(t) dt / (t ln(T/δ))` over `[δ, T]`: the mean of `f` under log-uniform
/// time, by composite Simpson in `ln t`.
fn log_uniform_mean(delta: f64, horizon: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 2000;
    let (a, b) = (delta.ln(), horizon.ln());
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    for k in 0..=n {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f((a + h * k as f64).exp());
    }
    acc * h / 3.0 / (b - a)
}

/// Population DSE at the true score: `E_t Σ_x p_x(t) Σ_i (c_i - c_i ln c_i)`.
fn dse_floor(p0: &DenseDistribution, delta: f64, horizon: f64) -> f64 {
    let score = ExactScore::new(p0.clone()).unwrap();
    log_uniform_mean(delta, horizon, |t| {
        let pt = evolve_exact(p0, t).unwrap();
        pt.states()
            .map(|x| {
                let c = score.score(x, t).unwrap();
                pt.prob(x) * c.as_slice().iter().map(|c| c - c * c.ln()).sum::<f64>()
            })
            .sum()
    })
}

fn pairs_for(p0: &DenseDistribution, n: usize, delta: f64, horizon: f64, seed: u64) -> Vec<NoisedPair> {
    let sampler = p0.sampler().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_noised_pairs(|r| sampler.sample(r), n, delta, horizon, &mut rng).unwrap()
}

#[test]
fn dse_at_exact_score_converges_to_its_minimum() {
    let d = 4;
    let (delta, horizon) = (0.05, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p0 = random_law(d, &mut rng);
    let score = ExactScore::new(p0.clone()).unwrap();
    let floor = dse_floor(&p0, delta, horizon);

    let reps = 16;
    let mean_abs_error = |n: usize| {
        (0..reps)
            .map(|r| {
                let pairs = pairs_for(&p0, n, delta, horizon, 1000 * n as u64 + r);
                (dse_estimate(&pairs, &score, None).unwrap().value - floor).abs()
            })
            .sum::<f64>()
            / reps as f64
    };
    let (small, large) = (mean_abs_error(1_000), mean_abs_error(100_000));
    let slope = (large / small).ln() / 100f64.ln();
    assert!((-0.8..=-0.25).contains(&slope), "slope {slope}: {small} -> {large}");
    assert!(large < 0.02 * floor.abs().max(1.0), "{large}");
}

#[test]
fn dse_excess_matches_expected_bregman_loss() {
    let d = 4;
    let (delta, horizon) = (0.05, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p0 = random_law(d, &mut rng);
    let exact = ExactScore::new(p0.clone()).unwrap();
    let alpha = 1.4;
    let scaled = Scaled(exact.clone(), alpha);
    let pairs = pairs_for(&p0, 100_000, delta, horizon, 11);

    // Paired differences keep the Monte Carlo error small.
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let (mut a, mut b) = (vec![0.0; d as usize], vec![0.0; d as usize]);
    for pair in &pairs {
        scaled.score_into(pair.xt, pair.t, &mut a).unwrap();
        exact.score_into(pair.xt, pair.t, &mut b).unwrap();
        let diff = dse_term(pair, &a).unwrap() - dse_term(pair, &b).unwrap();
        sum += diff;
        sum_sq += diff * diff;
    }
    let n = pairs.len() as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    let target = log_uniform_mean(delta, horizon, |t| {
        expected_loss_at(&evolve_exact(&p0, t).unwrap(), &scaled, t).unwrap()
    });
    assert!((mean - target).abs() < 4.0 * se, "{mean} vs {target} (se {se})");
}

#[test]
fn single_sample_one_dimension_by_hand() {
    let exact = ExactScore::new(DenseDistribution::new(1, vec![0.25, 0.75]).unwrap()).unwrap();
    let t = 0.3;
    let x0 = HypercubeState::new(0, 1).unwrap();
    let xt = HypercubeState::new(1, 1).unwrap();
    let s = exact.score(xt, t).unwrap().as_slice()[0];
    // X_t differs from X_0, so the kernel ratio is coth t.
    let expected = s - s.ln() / t.tanh();
    let report = dse_estimate(&[NoisedPair { t, x0, xt }], &exact, Some(5)).unwrap();
    assert!((report.value - expected).abs() < 1e-14);
    // ISE at X_t: s(X_t) - ln s(X_t + e_1), the neighbour's ratio back to X_t.
    let back = exact.score(x0, t).unwrap().as_slice()[0];
    let ise = ise_estimate(&[(t, xt)], &exact, None).unwrap();
    assert!((ise.value - (s - back.ln())).abs() < 1e-14);
}

#[test]
fn ise_and_dse_differ_by_a_score_independent_constant() {
    let d = 4;
    let (delta, horizon) = (0.05, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p0 = random_law(d, &mut rng);
    let exact = ExactScore::new(p0.clone()).unwrap();
    let edges = geometric_edges(delta, horizon, 16).unwrap();
    let s1 = perturb_score(exact.clone(), 0.3, 1, edges.clone()).unwrap();
    let s2 = Scaled(exact, 0.7);
    let pairs = pairs_for(&p0, 100_000, delta, horizon, 12);

    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for pair in &pairs {
        let single = [*pair];
        let marginal = [(pair.t, pair.xt)];
        let dse = dse_estimate(&single, &s1, None).unwrap().value - dse_estimate(&single, &s2, None).unwrap().value;
        let ise = ise_estimate(&marginal, &s1, None).unwrap().value - ise_estimate(&marginal, &s2, None).unwrap().value;
        sum += ise - dse;
        sum_sq += (ise - dse).powi(2);
    }
    let n = pairs.len() as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    assert!(mean.abs() < 4.0 * se, "mean gap {mean} (se {se})");
}

#[test]
fn path_kl_bounds_the_oracle_sampling_error() {
    let d = 4;
    let (delta, horizon) = (0.05, 3.0);
    let gamma = DenseDistribution::uniform(d).unwrap();
    let edges = geometric_edges(delta, horizon, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let p0 = random_law(d, &mut rng);
        let sigma = rng.random_range(0.02..0.4);
        let exact = ExactScore::new(p0.clone()).unwrap();
        let noisy = perturb_score(exact, sigma, trial, edges.clone()).unwrap();
        let bound = path_kl(&p0, &noisy, horizon, delta, &gamma, DEFAULT_QUAD_NODES)
            .unwrap()
            .value;
        let q = reverse_marginal(&noisy, &gamma, horizon, delta, 1000)
            .unwrap()
            .to_distribution(d)
            .unwrap();
        let actual = kl(&evolve_exact(&p0, delta).unwrap(), &q).unwrap();
        assert!(actual <= bound + 1e-4, "trial {trial}: {actual} > {bound}");
    }
}
