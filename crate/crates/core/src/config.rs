//! Run configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CovariateSchema;
use crate::harness::{DesignSpec, LinearDgp, MethodSpec};
use crate::predictor::backend::BackendConfig;
use crate::predictor::ExperimentContext;
use crate::stratification::covariance::DEFAULT_RIDGE_EPSILON;
use crate::stratification::StrataMethod;

pub const DEFAULT_REPS: usize = 3000;
pub const DEFAULT_EVAL_N: usize = 1000;
pub const SMALL_SAMPLE_EVAL_N: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn half() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<CovariateSchema>,
    #[serde(default)]
    pub context: Option<ExperimentContext>,
    /// Prompt template file replacing the built-in one.
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    /// Key into `backends`.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub retry: RetryConfig,
    /// Target share of treated units.
    #[serde(default = "half")]
    pub allocation: f64,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Prediction cache; defaults to `predictions.jsonl` in the output directory.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Concurrent backend requests.
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Simulation worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig { max_attempts: 3, base_delay_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// `sorted-pair`, `sorted-block`, `mahalanobis-pair` or `hybrid-pair`.
    pub method: String,
    #[serde(default = "four")]
    pub block_size: usize,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Covariates for the Mahalanobis term and regression adjustment;
    /// defaults to every numeric and categorical schema variable.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "ridge")]
    pub ridge_epsilon: f64,
    /// Categorical variables defining cells for the `categorical` baseline.
    #[serde(default)]
    pub strata_variables: Vec<String>,
}

fn four() -> usize {
    4
}

fn ridge() -> f64 {
    DEFAULT_RIDGE_EPSILON
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            method: "sorted-pair".into(),
            block_size: 4,
            lambda: None,
            covariates: None,
            ridge_epsilon: DEFAULT_RIDGE_EPSILON,
            strata_variables: Vec::new(),
        }
    }
}

impl DesignConfig {
    pub fn strata_method(&self) -> Result<StrataMethod, ConfigError> {
        let ridge_epsilon = self.ridge_epsilon;
        match self.method.as_str() {
            "sorted-pair" => Ok(StrataMethod::SortedPairs),
            "sorted-block" => Ok(StrataMethod::SortedBlocks { block_size: self.block_size }),
            "mahalanobis-pair" => Ok(StrataMethod::MahalanobisPairs { ridge_epsilon }),
            "hybrid-pair" => {
                if let Some(l) = self.lambda {
                    if !(0.0..=1.0).contains(&l) {
                        return Err(ConfigError::Invalid(format!("lambda {l} outside [0, 1]")));
                    }
                }
                Ok(StrataMethod::HybridPairs { lambda: self.lambda, ridge_epsilon })
            }
            other => Err(ConfigError::Invalid(format!("unknown design method `{other}`"))),
        }
    }
}

/// Where synthetic-pool scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScoreSource {
    /// The exact `g*(x)`.
    Oracle,
    /// Standard normal noise unrelated to outcomes.
    Noise,
    /// `rho z(g*) + sqrt(1 - rho^2) z(noise)` with standardized parts.
    Correlated { rho: f64 },
    /// The configured prediction backend, applied to each pool unit.
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dgp: LinearDgp,
    #[serde(default = "pool")]
    pub pool_size: usize,
    #[serde(default = "oracle")]
    pub scores: ScoreSource,
}

fn pool() -> usize {
    100_000
}

fn oracle() -> ScoreSource {
    ScoreSource::Oracle
}

fn default_methods() -> Vec<MethodSpec> {
    vec![MethodSpec::new(DesignSpec::Simple), MethodSpec::new(DesignSpec::SortedPair)]
}

fn default_baselines() -> Vec<String> {
    vec!["simple".into()]
}

fn reps() -> usize {
    DEFAULT_REPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "reps")]
    pub reps: usize,
    /// Units per replication; defaults to 1000, or 400 for samples under 1000.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            reps: DEFAULT_REPS,
            n: None,
            methods: default_methods(),
            baselines: default_baselines(),
            synthetic: None,
        }
    }
}

impl SimulationConfig {
    pub fn eval_n(&self, sample_size: usize) -> usize {
        self.n.unwrap_or(if sample_size < DEFAULT_EVAL_N { SMALL_SAMPLE_EVAL_N } else { DEFAULT_EVAL_N })
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub backend: Option<String>,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(b) = &overrides.backend {
            config.backend = Some(b.clone());
        }
        let mut loaded = LoadedConfig { config, base_dir };
        if let Some(o) = &overrides.output_dir {
            // command-line paths are relative to the working directory
            loaded.config.output_dir = std::path::absolute(o).unwrap_or_else(|_| o.clone());
        }
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir().join(name)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.config.cache {
            Some(p) => self.resolve(p),
            None => self.output("predictions.jsonl"),
        }
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.config.dataset.as_ref().map(|p| self.resolve(p))
    }

    pub fn backend_config(&self) -> Result<&BackendConfig, ConfigError> {
        let name = self
            .config
            .backend
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no backend selected".into()))?;
        self.config
            .backends
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("backend `{name}` is not defined in `backends`")))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if !(c.allocation > 0.0 && c.allocation < 1.0) {
            return Err(ConfigError::Invalid(format!("allocation {} outside (0, 1)", c.allocation)));
        }
        if c.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if c.retry.max_attempts == 0 {
            return Err(ConfigError::Invalid("retry.max_attempts must be at least 1".into()));
        }
        if let Some(s) = &c.schema {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if c.dataset.is_some() && c.schema.is_none() {
            return Err(ConfigError::Invalid("a dataset needs a schema".into()));
        }
        if let Some(b) = &c.backend {
            if !c.backends.contains_key(b) {
                return Err(ConfigError::Invalid(format!("backend `{b}` is not defined in `backends`")));
            }
        }
        c.design.strata_method()?;
        if c.simulation.reps == 0 {
            return Err(ConfigError::Invalid("simulation.reps must be at least 1".into()));
        }
        for b in &c.simulation.baselines {
            if !c.simulation.methods.iter().any(|m| &m.name() == b) {
                return Err(ConfigError::Invalid(format!("baseline `{b}` is not a configured method")));
            }
        }
        if let Some(s) = &c.simulation.synthetic {
            s.dgp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if let ScoreSource::Correlated { rho } = s.scores {
                if !(-1.0..=1.0).contains(&rho) {
                    return Err(ConfigError::Invalid(format!("score correlation {rho} outside [-1, 1]")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, first 16 hex digits.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    /// Comment text placed at the top of every output file.
    pub fn header(&self) -> String {
        format!(
            "stratkit config_hash={} seed_fingerprint={}",
            self.config_hash(),
            crate::rng::seed_fingerprint(self.config.seed)
        )
    }
}
