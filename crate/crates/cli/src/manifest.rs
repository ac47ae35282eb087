//! Run manifests: enough to reproduce a run, and nothing that varies between
//! identical runs.

use std::collections::BTreeMap;

use cubediff::sampler::{LambdaSchedule, TimePartition};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Column layout version of each CSV file the tool writes.
pub const CSV_SCHEMAS: &[(&str, u32, &[&str])] = &[
    ("samples.csv", 1, &["index", "state", "n_events", "n_flips"]),
    ("empirical.csv", 1, &["state", "count", "frequency", "target"]),
    ("evolve.csv", 1, &["t", "state", "mass"]),
    (
        "evolve_summary.csv",
        1,
        &[
            "t",
            "kl_to_uniform",
            "tv_to_data",
            "entropy",
            "max_neighbor_ratio",
            "envelope",
        ],
    ),
    ("loss_trace.csv", 1, &["epoch", "learning_rate", "dse"]),
    ("schedule.csv", 1, &["interval", "start", "end", "lambda", "tail"]),
];

pub fn csv_columns(file: &str) -> &'static [&'static str] {
    CSV_SCHEMAS
        .iter()
        .find(|(name, _, _)| *name == file)
        .map(|(_, _, cols)| *cols)
        .unwrap_or_else(|| panic!("no schema registered for {file}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub library: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            tool: env!("CARGO_PKG_VERSION").into(),
            library: cubediff::VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub total_mass: f64,
    pub bounded_tail: bool,
}

impl ScheduleRecord {
    pub fn new(partition: &TimePartition, schedule: &LambdaSchedule) -> Self {
        Self {
            times: partition.times.clone(),
            lambdas: schedule.lambdas.clone(),
            total_mass: schedule.total_mass,
            bounded_tail: partition.bounded_tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleRecord>,
    /// Output file name to schema version (CSV) or 1 (other formats).
    pub files: BTreeMap<String, u32>,
}
