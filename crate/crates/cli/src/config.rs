//! Config-file schema for every subcommand. One JSON document fully
//! determines a run; flags cover only output location, determinism, and
//! verbosity.

use std::fs;
use std::path::Path;

use adama_core::analysis::RegretProblem;
use adama_core::data::DatasetSpec;
use adama_core::memcalc::{ModelMemSpec, StrategyConfig};
use adama_core::nn::ModelSpec;
use adama_core::optim::{AdamConfig, UpdateMode};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Reads and parses a config file, returning the parsed document plus the
/// SHA-256 of the raw bytes (embedded in every artifact).
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let cfg: T = serde_json::from_slice(&bytes).map_err(|e| {
        CliError::Config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    Ok((cfg, hash))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Either a full layer-by-layer model spec or the dataset's default MLP.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Spec(ModelSpec),
    Default { hidden: usize, seed: u64 },
}

impl ModelConfig {
    pub fn resolve(&self, dataset: &DatasetSpec) -> ModelSpec {
        match self {
            ModelConfig::Spec(spec) => spec.clone(),
            ModelConfig::Default { hidden, seed } => dataset.default_model(*seed, *hidden),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub minibatch: usize,
    pub n_micro: usize,
    pub mode: UpdateMode,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub record_trace: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub minibatch: usize,
    pub n_micro: usize,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub precision: Precision,
    /// Steps skipped before the pointwise loss-gap statistic (the twins
    /// start identical, so early relative gaps on tiny losses are noise).
    #[serde(default)]
    pub gap_skip: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistsimConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub workers: usize,
    pub n_micro: usize,
    pub minibatch: usize,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Run workers on threads when true (subject to --deterministic and
    /// the ADAMA_LAB_THREADS cap); sequential lockstep otherwise.
    #[serde(default = "default_true")]
    pub threaded: bool,
    /// Also run the equivalent single-device N*W job and report the
    /// maximum relative parameter difference.
    #[serde(default = "default_true")]
    pub reference: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MemSpecConfig {
    Preset { preset: String },
    Inline(ModelMemSpec),
}

impl MemSpecConfig {
    pub fn resolve(&self) -> adama_core::Result<ModelMemSpec> {
        match self {
            MemSpecConfig::Preset { preset } => adama_core::memcalc::preset(preset),
            MemSpecConfig::Inline(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemcalcConfig {
    pub spec: MemSpecConfig,
    /// First entry is the savings baseline for the comparison table.
    pub configs: Vec<StrategyConfig>,
    pub minibatch: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegretConfig {
    pub problem: RegretProblem,
    pub horizon: usize,
    #[serde(default = "default_mode")]
    pub mode: UpdateMode,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Window for the log-log regret slope; defaults to
    /// [horizon/100, horizon].
    #[serde(default)]
    pub slope_window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaCheckConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub minibatch: usize,
    pub n_micro: usize,
    pub steps: usize,
    #[serde(default = "default_mode")]
    pub mode: UpdateMode,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Emit the per-coordinate bound arrays alongside the summaries.
    #[serde(default)]
    pub per_coord: bool,
}

fn default_true() -> bool {
    true
}

fn default_mode() -> UpdateMode {
    UpdateMode::AdamA
}
