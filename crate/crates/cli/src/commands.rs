//! The `evolve`, `sample`, `train` and `loss` subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cubediff::hypercube::{
    entropy, evolve_exact, kl, score_envelope, tv, DenseDistribution, HypercubeState, MAX_DENSE_DIM,
};
use cubediff::losses::{dse_estimate, ise_estimate, path_kl, score_error, LossReport, TimeWeighting};
use cubediff::oracle::reverse_marginal;
use cubediff::sampler::{clamp_score, trajectory_rng, ReverseSampler};
use cubediff::score::{ExactScore, ScoreFn};
use cubediff::train::{draw_noised_pairs, geometric_edges, perturb_score, train_tabular, ScoreTable, TrainConfig};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, ScoreSource};
use crate::error::{io_at, CliError, Result};
use crate::manifest::{Manifest, ScheduleRecord, Versions, CSV_SCHEMAS};
use crate::output::{fmt_f64, OutputDir};

/// RNG stream reserved for building random data laws.
pub const DATA_STREAM: u64 = u64::MAX;
/// RNG stream reserved for loss-estimator pairs.
pub const LOSS_STREAM: u64 = u64::MAX - 1;

/// Largest dimension for which `sample` writes per-state tables.
const EMPIRICAL_MAX_DIM: u32 = 12;
/// Largest dimension for the dense reverse-marginal comparison.
const ORACLE_MAX_DIM: u32 = 8;

pub fn data_law(config: &ExperimentConfig) -> Result<DenseDistribution> {
    let dim = config.sampler.dim;
    if dim > MAX_DENSE_DIM {
        return Err(CliError::Config(format!(
            "data laws are dense; sampler.dim = {dim} exceeds {MAX_DENSE_DIM}"
        )));
    }
    let mut rng = trajectory_rng(config.sampler.seed, DATA_STREAM);
    Ok(config.data.build(dim, &mut rng)?)
}

pub fn build_score(config: &ExperimentConfig, p0: &DenseDistribution) -> Result<Box<dyn ScoreFn>> {
    Ok(match &config.score {
        ScoreSource::Exact {} => Box::new(ExactScore::new(p0.clone())?),
        ScoreSource::TableFile { path } => {
            let file = File::open(path).map_err(io_at(path))?;
            let table = ScoreTable::read_binary(BufReader::new(file))?;
            if table.dim() != config.sampler.dim {
                return Err(CliError::Config(format!(
                    "{} holds a d = {} table; sampler.dim is {}",
                    path.display(),
                    table.dim(),
                    config.sampler.dim
                )));
            }
            Box::new(table)
        }
        ScoreSource::Perturbed { sigma, seed, buckets } => {
            let edges = geometric_edges(config.sampler.delta, config.sampler.horizon, *buckets)?;
            Box::new(perturb_score(ExactScore::new(p0.clone())?, *sigma, *seed, edges)?)
        }
    })
}

fn schema_version(name: &str) -> u32 {
    CSV_SCHEMAS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map_or(1, |(_, v, _)| *v)
}

fn finish(
    mut out: OutputDir,
    command: &str,
    config: &ExperimentConfig,
    schedule: Option<ScheduleRecord>,
    written: &[&str],
) -> Result<Vec<PathBuf>> {
    let files: BTreeMap<String, u32> = written.iter().map(|n| (n.to_string(), schema_version(n))).collect();
    let manifest = Manifest {
        command: command.into(),
        config: config.canonical(),
        config_hash: config.hash()?,
        seed: config.sampler.seed,
        versions: Versions::current(),
        schedule,
        files,
    };
    out.write_json("manifest.json", &manifest)?;
    out.commit()
}

fn report_times(config: &ExperimentConfig) -> Vec<f64> {
    let mut times = if config.evolve.times.is_empty() {
        vec![0.0, config.sampler.delta, 1.0, config.sampler.horizon]
    } else {
        config.evolve.times.clone()
    };
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Exact forward marginals at the configured times.
pub fn cmd_evolve(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let p0 = data_law(config)?;
    let d = config.sampler.dim;
    let gamma = DenseDistribution::uniform(d)?;
    let mut out = OutputDir::create(dir)?;
    let mut mass = out.csv("evolve.csv")?;
    let mut summary = out.csv("evolve_summary.csv")?;
    for t in report_times(config) {
        let pt = evolve_exact(&p0, t)?;
        for (x, m) in pt.mass().iter().enumerate() {
            mass.write_record([fmt_f64(t), x.to_string(), fmt_f64(*m)])?;
        }
        let envelope = if t > 0.0 {
            fmt_f64(score_envelope(t, config.sampler.mode)?)
        } else {
            String::new()
        };
        summary.write_record([
            fmt_f64(t),
            fmt_f64(kl(&pt, &gamma)?),
            fmt_f64(tv(&pt, &p0)?),
            fmt_f64(entropy(&pt)),
            fmt_f64(pt.max_neighbor_ratio()),
            envelope,
        ])?;
    }
    mass.flush().map_err(io_at(dir.join("evolve.csv")))?;
    summary.flush().map_err(io_at(dir.join("evolve_summary.csv")))?;
    drop((mass, summary));
    finish(out, "evolve", config, None, &["evolve.csv", "evolve_summary.csv"])
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    n_samples: usize,
    total_mass: f64,
    mean_events: f64,
    var_events: f64,
    mean_flips: f64,
    /// Law the sampler targets: `p(δ)` (or the data law when `δ = 0`).
    #[serde(skip_serializing_if = "Option::is_none")]
    tv_to_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tv_to_oracle: Option<f64>,
}

/// Runs the reverse sampler and writes every trajectory's end state.
pub fn cmd_sample(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let p0 = data_law(config)?;
    let d = config.sampler.dim;
    let score = build_score(config, &p0)?;
    let sampler = ReverseSampler::new(config.sampler.clone())?;
    let clamped = clamp_score(score.as_ref(), &config.sampler);
    let samples = sampler.sample_batch(&clamped)?;

    let mut out = OutputDir::create(dir)?;
    let mut written = vec!["samples.csv", "schedule.csv", "summary.json"];
    let mut w = out.csv("samples.csv")?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.state.bits().to_string(),
            s.stats.n_events.to_string(),
            s.stats.n_flips.to_string(),
        ])?;
    }
    w.flush().map_err(io_at(dir.join("samples.csv")))?;
    drop(w);

    let partition = sampler.partition();
    let mut w = out.csv("schedule.csv")?;
    for (k, lambda) in sampler.schedule().lambdas.iter().enumerate() {
        let (a, b) = partition.interval(k);
        w.write_record([
            k.to_string(),
            fmt_f64(a),
            fmt_f64(b),
            fmt_f64(*lambda),
            partition.is_tail(k).to_string(),
        ])?;
    }
    w.flush().map_err(io_at(dir.join("schedule.csv")))?;
    drop(w);

    let n = samples.len().max(1) as f64;
    let events: Vec<f64> = samples.iter().map(|s| s.stats.n_events as f64).collect();
    let mean_events = events.iter().sum::<f64>() / n;
    let var_events = events.iter().map(|e| (e - mean_events).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut summary = SampleSummary {
        n_samples: samples.len(),
        total_mass: sampler.schedule().total_mass,
        mean_events,
        var_events,
        mean_flips: samples.iter().map(|s| s.stats.n_flips as f64).sum::<f64>() / n,
        tv_to_target: None,
        tv_to_oracle: None,
    };
    if d <= EMPIRICAL_MAX_DIM && !samples.is_empty() {
        let empirical = DenseDistribution::empirical(d, samples.iter().map(|s| s.state))?;
        let target = evolve_exact(&p0, config.sampler.delta)?;
        summary.tv_to_target = Some(tv(&empirical, &target)?);
        if config.oracle.reverse_marginal && d <= ORACLE_MAX_DIM {
            let oracle = reverse_marginal(
                &clamped,
                &DenseDistribution::uniform(d)?,
                config.sampler.horizon,
                config.sampler.delta,
                config.oracle.steps_per_unit,
            )?
            .to_distribution(d)?;
            summary.tv_to_oracle = Some(tv(&empirical, &oracle)?);
        }
        let mut w = out.csv("empirical.csv")?;
        for x in 0..1usize << d {
            let count = (empirical.mass()[x] * n).round() as u64;
            w.write_record([
                x.to_string(),
                count.to_string(),
                fmt_f64(empirical.mass()[x]),
                fmt_f64(target.mass()[x]),
            ])?;
        }
        w.flush().map_err(io_at(dir.join("empirical.csv")))?;
        written.push("empirical.csv");
    }
    out.write_json("summary.json", &summary)?;
    let schedule = ScheduleRecord::new(partition, sampler.schedule());
    finish(out, "sample", config, Some(schedule), &written)
}

/// Fits a score table by denoising score entropy.
pub fn cmd_train(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let p0 = data_law(config)?;
    let data = p0.sampler()?;
    let s = &config.sampler;
    let train_config = TrainConfig {
        dim: s.dim,
        horizon: s.horizon,
        delta: s.delta,
        buckets: config.train.buckets,
        seed: s.seed,
    };
    let (table, report) = train_tabular(
        |rng: &mut ChaCha8Rng| data.sample(rng),
        &train_config,
        config.train.n_pairs,
        &config.train.sgd,
    )?;

    let mut out = OutputDir::create(dir)?;
    out.with_file("score_table.bin", |w| Ok(table.write_binary(w)?))?;
    out.write_json("score_table.json", &table.metadata())?;
    out.write_json("train_report.json", &report)?;
    let mut w = out.csv("loss_trace.csv")?;
    for (epoch, (lr, dse)) in report.learning_rates.iter().zip(&report.loss_trace).enumerate() {
        w.write_record([epoch.to_string(), fmt_f64(*lr), fmt_f64(*dse)])?;
    }
    w.flush().map_err(io_at(dir.join("loss_trace.csv")))?;
    drop(w);
    finish(
        out,
        "train",
        config,
        None,
        &[
            "score_table.bin",
            "score_table.json",
            "train_report.json",
            "loss_trace.csv",
        ],
    )
}

#[derive(Debug, Serialize)]
struct LossSummary {
    path_kl: LossReport,
    /// Time-averaged expected Bregman loss over `[δ, T]`.
    epsilon_uniform: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_log_uniform: Option<f64>,
    /// `KL(p(T) || γ) + (T - δ) ε`.
    budget: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dse_monte_carlo: Option<LossReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ise_monte_carlo: Option<LossReport>,
}

/// Path KL of the configured score by quadrature, plus optional Monte Carlo
/// score-entropy estimates.
pub fn cmd_loss(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let p0 = data_law(config)?;
    let score = build_score(config, &p0)?;
    let s = &config.sampler;
    let gamma = DenseDistribution::uniform(s.dim)?;
    let n_quad = config.loss.n_quad;
    let report = path_kl(&p0, score.as_ref(), s.horizon, s.delta, &gamma, n_quad)?;
    let epsilon_uniform = score_error(&p0, score.as_ref(), s.horizon, s.delta, TimeWeighting::Uniform, n_quad)?;
    let epsilon_log_uniform = if s.delta > 0.0 {
        Some(score_error(
            &p0,
            score.as_ref(),
            s.horizon,
            s.delta,
            TimeWeighting::LogUniform,
            n_quad,
        )?)
    } else {
        None
    };
    let (mut dse_mc, mut ise_mc) = (None, None);
    if config.loss.mc_samples > 0 {
        if s.delta <= 0.0 {
            return Err(CliError::Config("Monte Carlo losses need sampler.delta > 0".into()));
        }
        let data = p0.sampler()?;
        let mut rng = trajectory_rng(s.seed, LOSS_STREAM);
        let pairs = draw_noised_pairs(|r| data.sample(r), config.loss.mc_samples, s.delta, s.horizon, &mut rng)?;
        let marginal: Vec<(f64, HypercubeState)> = pairs.iter().map(|p| (p.t, p.xt)).collect();
        let mut dse = dse_estimate(&pairs, score.as_ref(), Some(s.seed))?;
        let mut ise = ise_estimate(&marginal, score.as_ref(), Some(s.seed))?;
        // One time per sample; reproducible from the seed and too large to keep.
        dse.time_points.clear();
        ise.time_points.clear();
        (dse_mc, ise_mc) = (Some(dse), Some(ise));
    }
    let summary = LossSummary {
        budget: report.terminal_kl.unwrap_or(0.0) + (s.horizon - s.delta) * epsilon_uniform,
        path_kl: report,
        epsilon_uniform,
        epsilon_log_uniform,
        dse_monte_carlo: dse_mc,
        ise_monte_carlo: ise_mc,
    };
    let mut out = OutputDir::create(dir)?;
    out.write_json("loss_report.json", &summary)?;
    finish(out, "loss", config, None, &["loss_report.json"])
}
