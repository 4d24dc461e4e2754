//! Monte Carlo evaluation of designs on imputed or synthetic ground truth.

pub mod dgp;
pub mod impute;
pub mod report;
pub mod simulate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dgp::{make_linear_dgp, LinearDgp, SyntheticDraw};
pub use impute::impute_counterfactuals;
pub use report::{emit_report, read_replications, render_report, write_replications, ReportFormat};
pub use simulate::{run_simulation, summarize, MethodComparison, MethodSummary, ReplicationRecord, SimSettings};

use crate::data::FeatureMatrix;
use crate::estimation::EstError;
use crate::stratification::{DesignInputs, StrataMethod, StratError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid simulation settings: {0}")]
    InvalidSettings(String),
    #[error("no methods left to report")]
    EmptyComparison,
    #[error("baseline `{0}` is not among the reported methods")]
    UnknownBaseline(String),
    #[error("replication file: {0}")]
    Parse(String),
    #[error(transparent)]
    Estimation(#[from] EstError),
    #[error(transparent)]
    Stratification(#[from] StratError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// `y0` observed, `y1` imputed.
    ObservedY0,
    /// `y1` observed, `y0` imputed.
    ObservedY1,
    Synthetic,
}

/// Full potential-outcome table used as ground truth.
#[derive(Debug, Clone)]
pub struct ImputedSample {
    pub unit_ids: Vec<String>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub covariates: Option<FeatureMatrix>,
    pub fallback_used: bool,
}

impl ImputedSample {
    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn true_tau(&self) -> f64 {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).sum::<f64>() / self.len() as f64
    }
}

/// Per-unit design inputs for the resampling pool: predictions and
/// covariates only, never outcomes.
#[derive(Debug, Clone, Default)]
pub struct DesignPool {
    pub scores: Option<Vec<f64>>,
    pub features: Option<FeatureMatrix>,
    pub strata_keys: Option<Vec<String>>,
}

impl DesignPool {
    /// Unit count, or `None` when the pool carries no inputs at all.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<usize> {
        self.scores
            .as_ref()
            .map(Vec::len)
            .or(self.features.as_ref().map(|f| f.n_rows))
            .or(self.strata_keys.as_ref().map(Vec::len))
    }

    /// Design inputs for a bootstrap draw of pool positions.
    pub fn inputs(&self, idx: &[usize]) -> DesignInputs {
        DesignInputs {
            scores: self.scores.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
            features: self.features.as_ref().map(|f| f.select_rows(idx)),
        }
    }
}

/// One design + estimator combination evaluated by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum DesignSpec {
    /// Complete randomization, difference in means.
    Simple,
    /// Complete randomization, OLS on the covariates with HC2 errors.
    Regression,
    SortedPair,
    SortedBlock {
        #[serde(default = "default_block")]
        block_size: usize,
    },
    MahalanobisPair {
        #[serde(default = "default_ridge")]
        ridge_epsilon: f64,
    },
    HybridPair {
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_ridge")]
        ridge_epsilon: f64,
    },
    /// Complete randomization within each category cell.
    Categorical,
}

fn default_block() -> usize {
    4
}

fn default_ridge() -> f64 {
    crate::stratification::covariance::DEFAULT_RIDGE_EPSILON
}

impl DesignSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            DesignSpec::Simple => "simple",
            DesignSpec::Regression => "regression",
            DesignSpec::Categorical => "categorical",
            other => other.strata_method().expect("stratified").tag(),
        }
    }

    pub fn strata_method(&self) -> Option<StrataMethod> {
        match *self {
            DesignSpec::SortedPair => Some(StrataMethod::SortedPairs),
            DesignSpec::SortedBlock { block_size } => Some(StrataMethod::SortedBlocks { block_size }),
            DesignSpec::MahalanobisPair { ridge_epsilon } => Some(StrataMethod::MahalanobisPairs { ridge_epsilon }),
            DesignSpec::HybridPair { lambda, ridge_epsilon } => Some(StrataMethod::HybridPairs { lambda, ridge_epsilon }),
            DesignSpec::Simple | DesignSpec::Regression | DesignSpec::Categorical => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    #[serde(flatten)]
    pub design: DesignSpec,
    /// Report name; defaults to the method tag.
    #[serde(default)]
    pub label: Option<String>,
}

impl MethodSpec {
    pub fn new(design: DesignSpec) -> Self {
        MethodSpec { design, label: None }
    }

    pub fn named(design: DesignSpec, label: &str) -> Self {
        MethodSpec { design, label: Some(label.to_string()) }
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.design.tag().to_string())
    }
}
