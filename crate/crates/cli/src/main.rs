use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cubediff_cli::commands::{cmd_evolve, cmd_loss, cmd_sample, cmd_train};
use cubediff_cli::config::{ExperimentConfig, OUT_DIR_ENV};
use cubediff_cli::output::OutputDir;
use cubediff_cli::verify::{run_suite, Profile, DEFAULT_VERIFY_SEED};
use cubediff_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "cubediff", version, about = "Discrete diffusion on the binary hypercube")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact forward marginals and their statistics.
    Evolve(RunArgs),
    /// Reverse-process samples.
    Sample(RunArgs),
    /// Fit a tabular score by score entropy.
    Train(RunArgs),
    /// Path KL and score-error report for the configured score.
    Loss(RunArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `sampler.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (also `CUBEDIFF_OUT_DIR`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "full")]
    profile: Profile,
    #[arg(long, default_value_t = DEFAULT_VERIFY_SEED)]
    seed: u64,
    /// Directory for `verify_report.json`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn run_experiment(args: &RunArgs, f: fn(&ExperimentConfig, &Path) -> Result<Vec<PathBuf>>) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.sampler.seed = seed;
    }
    let dir = config.resolve_out_dir(args.out.as_deref());
    for path in f(&config, &dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let report = run_suite(args.profile, args.seed, |c| {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {:>2} {:<34} {:>7.1}s  {}", c.id, c.name, c.seconds, c.detail);
    });
    println!("{} passed, {} failed", report.passed, report.failed);
    let dir = args
        .out
        .clone()
        .or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut out = OutputDir::create(&dir)?;
    out.write_json("verify_report.json", &report)?;
    out.commit()?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed {
            failed: report.failed,
            total: report.criteria.len(),
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()?;
    pool.install(|| match &cli.command {
        Command::Evolve(a) => run_experiment(a, cmd_evolve),
        Command::Sample(a) => run_experiment(a, cmd_sample),
        Command::Train(a) => run_experiment(a, cmd_train),
        Command::Loss(a) => run_experiment(a, cmd_loss),
        Command::Verify(a) => verify(a),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
