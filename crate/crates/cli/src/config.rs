//! Experiment configuration: one TOML file, every table closed to unknown
//! keys. `CONFIG.md` in the repository documents the schema.

use std::fs;
use std::path::{Path, PathBuf};

use cubediff::data::DataPreset;
use cubediff::losses::DEFAULT_QUAD_NODES;
use cubediff::oracle::DEFAULT_STEPS_PER_UNIT;
use cubediff::sampler::SamplerConfig;
use cubediff::train::{SgdParams, DEFAULT_BUCKETS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::manifest::Manifest;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "CUBEDIFF_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sampler: SamplerConfig,
    pub data: DataPreset,
    #[serde(default)]
    pub score: ScoreSource,
    #[serde(default)]
    pub evolve: EvolveSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSource {
    /// The true score of the data law. A struct variant so that stray keys
    /// are rejected.
    Exact {},
    /// A score table written by `train`.
    TableFile { path: PathBuf },
    /// The true score times `exp(σ z)` with fixed standard normals `z`.
    Perturbed {
        sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_buckets")]
        buckets: usize,
    },
}

impl Default for ScoreSource {
    fn default() -> Self {
        ScoreSource::Exact {}
    }
}

fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSettings {
    /// Forward times to report; empty means `0, δ, 1, T`.
    #[serde(default)]
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    #[serde(default)]
    pub sgd: SgdParams,
}

fn default_pairs() -> usize {
    100_000
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            n_pairs: default_pairs(),
            buckets: default_buckets(),
            sgd: SgdParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    #[serde(default = "default_quad")]
    pub n_quad: usize,
    /// Pairs for Monte Carlo ISE/DSE estimates; 0 skips them.
    #[serde(default)]
    pub mc_samples: usize,
}

fn default_quad() -> usize {
    DEFAULT_QUAD_NODES
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            n_quad: default_quad(),
            mc_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    /// Compare `sample` output with the ODE reverse marginal (d <= 8).
    #[serde(default)]
    pub reverse_marginal: bool,
    #[serde(default = "default_steps")]
    pub steps_per_unit: usize,
}

fn default_steps() -> usize {
    DEFAULT_STEPS_PER_UNIT
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            reverse_marginal: false,
            steps_per_unit: default_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a TOML config, or the `config` of a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| CliError::ConfigParse {
            path: path.to_path_buf(),
            message,
        };
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<Manifest>(&text)
                .map_err(|e| parse_err(e.to_string()))?
                .config
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        config.validate().map_err(|e| parse_err(e.to_string()))?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.loss.n_quad < 3 {
            return Err(CliError::Config("loss.n_quad must be at least 3".into()));
        }
        if self.oracle.steps_per_unit == 0 {
            return Err(CliError::Config("oracle.steps_per_unit must be positive".into()));
        }
        if self.evolve.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(CliError::Config("evolve.times must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// The config as recorded in manifests: the output directory is where a
    /// run landed, not part of what it computed, so it is dropped.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.output.dir = None;
        c
    }

    /// SHA-256 of the canonical config's JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.canonical())?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Output directory: flag, then environment, then config, then `out`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| {
                std::env::var_os(OUT_DIR_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
