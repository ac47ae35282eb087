//! Invariants checked over generated inputs.

use cubediff::data::bounded_ratio;
use cubediff::hypercube::{
    evolve_exact, exact_score, heat_kernel, kl, score_envelope, DenseDistribution, HypercubeState, RatioMode,
};
use cubediff::oracle::{integrate_forward, propagate_expm, FnGenerator, GeneratorMatrix};
use cubediff::sampler::{build_lambda_schedule, build_partition, clamp_score, trajectory_rng, ReverseSampler};
use cubediff::score::{ConstantScore, ExactScore, ScoreFn};
use cubediff::SamplerConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A positive law on `{0,1}^d` built from generated weights.
fn law(d: u32) -> impl Strategy<Value = DenseDistribution> {
    prop::collection::vec(1e-6f64..1.0, 1usize << d).prop_map(move |w| DenseDistribution::from_weights(d, w).unwrap())
}

fn dim_and_law(max_d: u32) -> impl Strategy<Value = DenseDistribution> {
    (1..=max_d).prop_flat_map(law)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_is_stationary(d in 1u32..=10, t in 0.0f64..20.0) {
        let g = DenseDistribution::uniform(d).unwrap();
        let gt = evolve_exact(&g, t).unwrap();
        prop_assert!(max_abs_diff(g.mass(), gt.mass()) < 1e-12);
    }

    #[test]
    fn evolution_is_a_semigroup(p in dim_and_law(7), s in 0.0f64..3.0, t in 0.0f64..3.0) {
        let two_steps = evolve_exact(&evolve_exact(&p, s).unwrap(), t).unwrap();
        let one_step = evolve_exact(&p, s + t).unwrap();
        prop_assert!(max_abs_diff(two_steps.mass(), one_step.mass()) < 1e-10);
    }

    #[test]
    fn point_mass_evolves_to_heat_kernel(d in 1u32..=8, a in any::<u64>(), t in 1e-4f64..5.0) {
        let a = HypercubeState::new(a & ((1 << d) - 1), d).unwrap();
        let pt = evolve_exact(&DenseDistribution::point_mass(a).unwrap(), t).unwrap();
        for b in pt.states() {
            prop_assert!((pt.prob(b) - heat_kernel(a.xor(b), t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn evolution_keeps_mass_and_sign(p in dim_and_law(8), t in 0.0f64..5.0) {
        let pt = evolve_exact(&p, t).unwrap();
        prop_assert!(pt.mass().iter().all(|&m| m >= 0.0));
        prop_assert!((pt.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evolution_matches_matrix_exponential(p in dim_and_law(5), t in 0.0f64..3.0) {
        let q = GeneratorMatrix::hypercube(p.dim()).unwrap();
        let reference = propagate_expm(&q, p.mass(), t).unwrap();
        prop_assert!(max_abs_diff(evolve_exact(&p, t).unwrap().mass(), &reference) < 1e-10);
    }

    #[test]
    fn kl_to_uniform_contracts(p in dim_and_law(6), t in 0.0f64..4.0) {
        let g = DenseDistribution::uniform(p.dim()).unwrap();
        let k0 = kl(&p, &g).unwrap();
        let kt = kl(&evolve_exact(&p, t).unwrap(), &g).unwrap();
        prop_assert!(kt <= (-t).exp() * k0 + 1e-15);
    }

    #[test]
    fn scores_stay_below_the_envelope(p in dim_and_law(6), t in 1e-3f64..6.0) {
        let pt = evolve_exact(&p, t).unwrap();
        let bound = score_envelope(t, RatioMode::General).unwrap();
        for x in pt.states() {
            prop_assert!(exact_score(&pt, x).unwrap().max() <= bound);
        }
    }

    #[test]
    fn point_mass_scores_reach_but_never_pass_the_envelope(d in 1u32..=6, t in 1e-3f64..6.0) {
        let p = DenseDistribution::point_mass(HypercubeState::zero(d).unwrap()).unwrap();
        let pt = evolve_exact(&p, t).unwrap();
        let bound = score_envelope(t, RatioMode::General).unwrap();
        let worst = pt.states().map(|x| exact_score(&pt, x).unwrap().max()).fold(0.0, f64::max);
        // Equality holds exactly here, so allow rounding either way.
        prop_assert!((worst / bound - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ratio_bound_is_preserved(seed in any::<u64>(), d in 1u32..=6, l in 1.0f64..10.0, t in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = bounded_ratio(d, l, &mut rng).unwrap();
        prop_assert!(p.max_neighbor_ratio() <= l);
        prop_assert!(evolve_exact(&p, t).unwrap().max_neighbor_ratio() <= l);
    }

    #[test]
    fn partition_and_schedule_invariants(
        d in 1u32..=64,
        horizon in 0.1f64..12.0,
        log_delta in -8.0f64..0.0,
        c in 0.05f64..2.0,
        bounded in prop::option::of(1.0f64..20.0),
    ) {
        let delta = 10f64.powf(log_delta).min(0.9 * horizon);
        let mut cfg = SamplerConfig::new(d.min(63), horizon, delta);
        cfg.partition_c = c;
        if let Some(l) = bounded {
            cfg = cfg.with_mode(RatioMode::Bounded(l));
        }
        let p = build_partition(&cfg).unwrap();
        prop_assert!(p.n_intervals() >= 1);
        prop_assert!(p.satisfies_step_rule());
        prop_assert_eq!(p.times[0], 0.0);
        prop_assert!((p.times[p.n_intervals()] - (horizon - delta)).abs() <= 1e-12 * horizon);
        let s = build_lambda_schedule(&p, &cfg).unwrap();
        prop_assert!(s.total_mass.is_finite());
        for k in 0..p.n_intervals() {
            let (_, b) = p.interval(k);
            if !p.is_tail(k) {
                let needed = cfg.dim as f64 * score_envelope(horizon - b, cfg.mode).unwrap();
                prop_assert!(s.lambdas[k] >= needed);
            }
        }
        if bounded.is_none() {
            prop_assert!(s.lambdas.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn clamped_totals_respect_the_envelope(
        values in prop::collection::vec(1e-3f64..1e6, 1..10),
        t in 1e-4f64..5.0,
        bound in prop::option::of(1.0f64..10.0),
    ) {
        let d = values.len() as u32;
        let mut cfg = SamplerConfig::new(d, 6.0, 1e-3);
        if let Some(l) = bound {
            cfg = cfg.with_mode(RatioMode::Bounded(l));
        }
        let raw = ConstantScore::new(values.clone()).unwrap();
        let clamped = clamp_score(&raw, &cfg);
        let x = HypercubeState::zero(d).unwrap();
        let s = clamped.score(x, t).unwrap();
        let cap = d as f64 * score_envelope(t, cfg.mode).unwrap();
        prop_assert!(s.total() <= cap * (1.0 + 1e-12));
        if values.iter().sum::<f64>() <= cap {
            prop_assert_eq!(s.as_slice(), &values[..]);
        }
    }

    #[test]
    fn flips_never_exceed_events(seed in any::<u64>(), p in dim_and_law(4), delta in 1e-3f64..0.5) {
        let sampler = ReverseSampler::new(SamplerConfig::new(p.dim(), 3.0, delta)).unwrap();
        let score = ExactScore::new(p).unwrap();
        for i in 0..20 {
            let out = sampler.sample_one(&score, &mut trajectory_rng(seed, i)).unwrap();
            prop_assert!(out.stats.n_flips <= out.stats.n_events);
            let per_interval: u64 = out.stats.per_interval_events.iter().map(|&e| e as u64).sum();
            prop_assert_eq!(per_interval, out.stats.n_events);
        }
    }

    #[test]
    fn rk4_conserves_mass(a in 0.1f64..2.0, b in 0.1f64..2.0, w in 0.0f64..3.0, horizon in 0.1f64..3.0) {
        let gen = FnGenerator::new(3, move |t: f64| {
            GeneratorMatrix::from_off_diagonal(3, |x, y| a + b * ((w * t + (x * 3 + y) as f64).sin()).abs())
        });
        let steps = (2000.0 * horizon).ceil() as usize;
        let sol = integrate_forward(&gen, &[0.2, 0.5, 0.3], 0.0, horizon, steps).unwrap();
        prop_assert!(sol.mass_drift.abs() <= 1e-9 * horizon);
        prop_assert!(sol.p.iter().all(|&v| v >= 0.0));
    }
}
