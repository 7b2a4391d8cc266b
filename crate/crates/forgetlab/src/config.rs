//! Run-level configuration: one JSON document aggregating every module's
//! knobs, resolved with flag > config-file > default precedence.
//!
//! [`RunConfig`] is the single structured config the CLI reads and writes.
//! Command-line flags arrive as an [`Overlay`] whose `Some` fields replace
//! the corresponding config values, so precedence is auditable per field.
//! Every mutating subcommand writes its fully resolved config next to its
//! outputs, and `train` maintains a [`RunManifest`] tying the per-seed run
//! directories together for `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asd::{AsdConfig, RuleOverrides};
use crate::rewriter::{HttpPolicy, HttpRewriter, Rewriter, TemplateRewriter};
use crate::toy_tasks::SuiteConfig;
use crate::trainer::{BaselineMode, TrainConfig};

/// Environment variable naming the rewrite-service URL, used when neither
/// the `--endpoint` flag nor the config file provides one.
pub const ENV_REWRITER_URL: &str = "FORGETLAB_REWRITER_URL";

/// Fully resolved config written next to a subcommand's outputs.
pub const CONFIG_FILE: &str = "config.json";
/// Manifest `train` maintains in its output directory and `report` reads.
pub const MANIFEST_FILE: &str = "manifest.json";
/// Per-run accuracy matrices, one CSV per view.
pub const JOINT_CSV: &str = "joint.csv";
pub const STYLE_CSV: &str = "style.csv";
pub const CONTENT_CSV: &str = "content.csv";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ConfigError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn json(path: &Path, source: serde_json::Error) -> Self {
        ConfigError::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Which rewrite backend the `asd` subcommand calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriterBackend {
    /// Deterministic template backend; no network, word bands enforced.
    Template,
    /// JSON-over-HTTP service; endpoint resolved from flag, config, or
    /// [`ENV_REWRITER_URL`].
    Http,
}

impl std::fmt::Display for RewriterBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewriterBackend::Template => "template",
            RewriterBackend::Http => "http",
        })
    }
}

impl std::str::FromStr for RewriterBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "template" => Ok(RewriterBackend::Template),
            "http" => Ok(RewriterBackend::Http),
            other => Err(format!(
                "unknown rewriter {other:?}; expected template or http"
            )),
        }
    }
}

/// Rewrite-backend selection and transport policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriterConfig {
    pub backend: RewriterBackend,
    /// Rewrite-service URL for the HTTP backend. `None` falls back to the
    /// [`ENV_REWRITER_URL`] environment variable.
    pub endpoint: Option<String>,
    pub policy: HttpPolicy,
}

impl Default for RewriterConfig {
    fn default() -> Self {
        RewriterConfig {
            backend: RewriterBackend::Template,
            endpoint: None,
            policy: HttpPolicy::default(),
        }
    }
}

impl RewriterConfig {
    /// The endpoint the HTTP backend would use: the configured one when
    /// present, otherwise the caller-read environment value. Empty strings
    /// count as unset.
    pub fn resolved_endpoint(&self, env_value: Option<&str>) -> Option<String> {
        self.endpoint
            .clone()
            .or_else(|| env_value.map(str::to_string))
            .filter(|url| !url.trim().is_empty())
    }

    /// Construct the selected backend. `env_value` is the caller-read value
    /// of [`ENV_REWRITER_URL`]; it is a parameter so resolution stays a pure
    /// function of its inputs.
    pub fn build(&self, env_value: Option<&str>) -> Result<Box<dyn Rewriter>, ConfigError> {
        match self.backend {
            RewriterBackend::Template => Ok(Box::new(TemplateRewriter::default())),
            RewriterBackend::Http => {
                let endpoint = self.resolved_endpoint(env_value).ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "the http rewriter needs an endpoint: pass --endpoint, set \
                         rewriter.endpoint, or export {ENV_REWRITER_URL}"
                    ))
                })?;
                let rewriter = HttpRewriter::new(endpoint, self.policy.clone())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Box::new(rewriter))
            }
        }
    }
}

/// Everything a run needs, in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic-suite shape for `synth` and for `train` runs that generate
    /// their own tasks.
    pub suite: SuiteConfig,
    /// Sequential-training hyperparameters, including the regularizer.
    pub train: TrainConfig,
    /// Dataset diversification settings for `asd`.
    pub asd: AsdConfig,
    /// Active conversion rule overrides for `asd`.
    pub overrides: RuleOverrides,
    pub rewriter: RewriterConfig,
    /// Seeds the `train` subcommand sweeps; each seed re-derives both the
    /// task suite and the model initialization.
    pub seeds: Vec<u64>,
    /// Where `train` writes matrices, checkpoints, and the manifest.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
            asd: AsdConfig::default(),
            overrides: RuleOverrides::default(),
            rewriter: RewriterConfig::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Read and validate a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::io(path, e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::json(path, e))?;
        config.validate()?;
        Ok(config)
    }

    /// Write the fully resolved config as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| ConfigError::io(path, e))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.suite
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.asd.percent.is_finite() || !(0.0..=100.0).contains(&self.asd.percent) {
            return Err(ConfigError::Invalid(format!(
                "asd.percent {} is outside [0, 100]",
                self.asd.percent
            )));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds list is empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(ConfigError::Invalid(
                "seeds list has duplicates; runs would overwrite each other".into(),
            ));
        }
        if self.rewriter.policy.retries > 5 {
            return Err(ConfigError::Invalid(format!(
                "rewriter.policy.retries must be at most 5, got {}",
                self.rewriter.policy.retries
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("out_dir is empty".into()));
        }
        Ok(())
    }
}

/// Command-line values; `None` leaves the config-file (or default) value in
/// place. One field per exposed flag keeps the precedence rule auditable
/// per field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlay {
    /// `--x`: percentage of each source-format group `asd` transforms.
    pub x: Option<f64>,
    /// `--seed`: data-side seed, applied to both the dataset transform and
    /// the synthetic-suite generator.
    pub seed: Option<u64>,
    /// `--strict`: abort `asd` on the first conversion failure.
    pub strict: Option<bool>,
    /// `--rewriter`: backend selection.
    pub rewriter: Option<RewriterBackend>,
    /// `--endpoint`: rewrite-service URL.
    pub endpoint: Option<String>,
    /// `--timeout-ms`: per-request timeout for the HTTP backend.
    pub timeout_ms: Option<u64>,
    /// `--retries`: additional HTTP attempts after the first.
    pub retries: Option<u32>,
    /// `--mix`: style-mix percentage of generated suites.
    pub mix: Option<f64>,
    /// `--n-tasks`: tasks per generated suite.
    pub n_tasks: Option<usize>,
    /// `--samples`: samples per generated task.
    pub samples: Option<usize>,
    /// `--mode`: which loss the trainer optimizes.
    pub mode: Option<BaselineMode>,
    /// `--m`: key-element percentage for the regularizer.
    pub m_percent: Option<f64>,
    /// `--lambda`: regularization strength.
    pub lambda: Option<f64>,
    /// `--epochs`: training epochs per task.
    pub epochs: Option<usize>,
    /// `--seeds`: seed sweep for `train`.
    pub seeds: Option<Vec<u64>>,
    /// `--out`: output directory or file.
    pub out_dir: Option<PathBuf>,
}

impl Overlay {
    /// Replace each config value whose overlay field is set.
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(x) = self.x {
            config.asd.percent = x;
        }
        if let Some(seed) = self.seed {
            config.asd.seed = seed;
            config.suite.seed = seed;
        }
        if let Some(strict) = self.strict {
            config.asd.strict = strict;
        }
        if let Some(backend) = self.rewriter {
            config.rewriter.backend = backend;
        }
        if let Some(endpoint) = &self.endpoint {
            config.rewriter.endpoint = Some(endpoint.clone());
        }
        if let Some(timeout_ms) = self.timeout_ms {
            config.rewriter.policy.timeout_ms = timeout_ms;
        }
        if let Some(retries) = self.retries {
            config.rewriter.policy.retries = retries;
        }
        if let Some(mix) = self.mix {
            config.suite.style_mix_percent = mix;
        }
        if let Some(n_tasks) = self.n_tasks {
            config.suite.n_tasks = n_tasks;
        }
        if let Some(samples) = self.samples {
            config.suite.samples_per_task = samples;
        }
        if let Some(mode) = self.mode {
            config.train.mode = mode;
        }
        if let Some(m_percent) = self.m_percent {
            config.train.reg.m_percent = m_percent;
        }
        if let Some(lambda) = self.lambda {
            config.train.reg.lambda = lambda;
        }
        if let Some(epochs) = self.epochs {
            config.train.epochs = epochs;
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(out_dir) = &self.out_dir {
            config.out_dir = out_dir.clone();
        }
    }
}

/// Resolve the effective config: defaults, then the config file when given,
/// then the flag overlay, then validation of the result.
pub fn resolve(file: Option<&Path>, overlay: &Overlay) -> Result<RunConfig, ConfigError> {
    let mut config = match file {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overlay.apply(&mut config);
    config.validate()?;
    Ok(config)
}

/// Read an overrides file: a JSON object mapping dataset names to their
/// conversion rules, with the entry `"*"` as the fallback.
pub fn load_overrides(path: &Path) -> Result<BTreeMap<String, RuleOverrides>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::json(path, e))
}

/// Pick the rules for `dataset_name`: the exact entry, else `"*"`, else the
/// defaults.
pub fn select_overrides(
    map: &BTreeMap<String, RuleOverrides>,
    dataset_name: &str,
) -> RuleOverrides {
    map.get(dataset_name)
        .or_else(|| map.get("*"))
        .cloned()
        .unwrap_or_default()
}

/// One training run's artifacts, relative to the manifest's directory: the
/// three accuracy CSVs, one checkpoint per task, and the run's own resolved
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: BaselineMode,
    pub seed: u64,
    /// Run directory relative to the manifest.
    pub dir: String,
    /// Tasks in the training sequence.
    pub tasks: usize,
}

impl RunRecord {
    /// Conventional run directory for a mode/seed pair.
    pub fn dir_for(mode: BaselineMode, seed: u64) -> String {
        format!("{mode}/seed_{seed}")
    }
}

/// Index of every run under one output directory. `train` upserts into it;
/// `report` walks it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    /// Read and validate a manifest.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::io(path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| ConfigError::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| ConfigError::io(path, e))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, run) in self.runs.iter().enumerate() {
            if run.dir.is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "manifest run {i} has an empty directory"
                )));
            }
            if run.tasks == 0 {
                return Err(ConfigError::Invalid(format!(
                    "manifest run {i} claims zero tasks"
                )));
            }
            for other in &self.runs[i + 1..] {
                if run.mode == other.mode && run.seed == other.seed {
                    return Err(ConfigError::Invalid(format!(
                        "manifest lists {} seed {} twice",
                        run.mode, run.seed
                    )));
                }
            }
        }
        Ok(())
    }

    /// Insert `record`, replacing any existing entry for the same mode and
    /// seed so re-running a configuration refreshes its row.
    pub fn upsert(&mut self, record: RunRecord) {
        match self
            .runs
            .iter_mut()
            .find(|r| r.mode == record.mode && r.seed == record.seed)
        {
            Some(existing) => *existing = record,
            None => self.runs.push(record),
        }
    }
}
