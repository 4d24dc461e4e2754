//! Seeded bootstrap replications of each design.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DesignPool, DesignSpec, HarnessError, ImputedSample, MethodSpec};
use crate::estimation::{difference_in_means, ols_adjusted_estimate, paired_estimate, EstimateReport};
use crate::randomization::{assign_treatments, categorical_randomization, complete_randomization};
use crate::rng::{derive_seed, domain, hash_str, stream};
use crate::stratification::{form_strata, DesignInputs};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub methods: Vec<MethodSpec>,
    pub reps: usize,
    /// Units drawn with replacement per replication.
    pub n: usize,
    pub p: f64,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: String,
    pub tau_hat: f64,
    pub se_hat: f64,
    pub tau_true: f64,
    /// Hash of the design inputs (scores and covariates) the method saw.
    pub design_fingerprint: String,
}

impl ReplicationRecord {
    pub fn error(&self) -> f64 {
        self.tau_hat - self.tau_true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub reps: usize,
    pub mse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_se: f64,
    pub bias: f64,
    /// Monte Carlo standard error of `bias`.
    pub bias_se: f64,
    /// Share of replications with `|tau_hat - tau| <= 1.96 se`.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComparison {
    pub rows: Vec<MethodSummary>,
    /// Methods excluded after an error, with the first error message.
    pub failures: Vec<(String, String)>,
}

impl MethodComparison {
    pub fn get(&self, method: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `(A - B) / A * 100` with `A` the baseline's MSE.
    pub fn mse_improvement(&self, method: &str, baseline: &str) -> Option<f64> {
        Some(relative_improvement(self.get(baseline)?.mse, self.get(method)?.mse))
    }

    pub fn mse_ratio(&self, method: &str, baseline: &str) -> Option<f64> {
        Some(self.get(method)?.mse / self.get(baseline)?.mse)
    }
}

pub fn relative_improvement(a: f64, b: f64) -> f64 {
    (a - b) / a * 100.0
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub records: Vec<ReplicationRecord>,
    pub comparison: MethodComparison,
}

fn validate(sample: &ImputedSample, pool: &DesignPool, settings: &SimSettings) -> Result<(), HarnessError> {
    if settings.reps == 0 {
        return Err(HarnessError::InvalidSettings("reps must be at least 1".into()));
    }
    if settings.n < 2 {
        return Err(HarnessError::InvalidSettings("n must be at least 2".into()));
    }
    if settings.methods.is_empty() {
        return Err(HarnessError::InvalidSettings("no methods configured".into()));
    }
    if sample.is_empty() {
        return Err(HarnessError::InvalidSample("empty sample".into()));
    }
    if pool.len().is_some_and(|m| m != sample.len()) {
        return Err(HarnessError::InvalidSample("design pool and sample sizes differ".into()));
    }
    let mut names: Vec<String> = settings.methods.iter().map(MethodSpec::name).collect();
    names.sort();
    names.dedup();
    if names.len() != settings.methods.len() {
        return Err(HarnessError::InvalidSettings("method names must be unique; add labels".into()));
    }
    Ok(())
}

/// Checks a method's inputs exist before any replication runs.
fn precheck(spec: &MethodSpec, pool: &DesignPool) -> Result<(), String> {
    match &spec.design {
        DesignSpec::Simple => Ok(()),
        DesignSpec::Regression if pool.features.is_none() => Err("regression needs covariates".into()),
        DesignSpec::Regression => Ok(()),
        DesignSpec::Categorical if pool.strata_keys.is_none() => Err("categorical needs strata variables".into()),
        DesignSpec::Categorical => Ok(()),
        other => {
            let m = other.strata_method().expect("stratified");
            if m.needs_scores() && pool.scores.is_none() {
                return Err(format!("{} needs prognostic scores", m.tag()));
            }
            if m.needs_features() && pool.features.is_none() {
                return Err(format!("{} needs covariates", m.tag()));
            }
            Ok(())
        }
    }
}

fn fingerprint_hex(v: u64) -> String {
    format!("{v:016x}")
}

fn estimate_one(
    spec: &MethodSpec,
    inputs: &DesignInputs,
    keys: Option<&[String]>,
    y0: &[f64],
    y1: &[f64],
    p: f64,
    design_seed: u64,
) -> Result<EstimateReport, String> {
    let n = y0.len();
    let reveal = |t: &[u8]| -> Vec<f64> { (0..n).map(|i| if t[i] == 1 { y1[i] } else { y0[i] }).collect() };
    let err = |e: &dyn std::fmt::Display| e.to_string();
    match &spec.design {
        DesignSpec::Simple => {
            let t = complete_randomization(n, p, design_seed).map_err(|e| err(&e))?;
            difference_in_means(&reveal(&t), &t).map_err(|e| err(&e))
        }
        DesignSpec::Regression => {
            let t = complete_randomization(n, p, design_seed).map_err(|e| err(&e))?;
            ols_adjusted_estimate(&reveal(&t), &t, inputs.features.as_ref()).map_err(|e| err(&e))
        }
        DesignSpec::Categorical => {
            let t = categorical_randomization(keys.expect("prechecked"), p, design_seed).map_err(|e| err(&e))?;
            difference_in_means(&reveal(&t), &t).map_err(|e| err(&e))
        }
        other => {
            let method = other.strata_method().expect("stratified");
            let set = form_strata(inputs, &method).map_err(|e| err(&e))?;
            let t = assign_treatments(&set, n, p, design_seed).map_err(|e| err(&e))?;
            let y = reveal(&t);
            if set.is_paired() {
                paired_estimate(&set, &y, &t).map_err(|e| err(&e))
            } else {
                difference_in_means(&y, &t).map_err(|e| err(&e))
            }
        }
    }
}

type RepResult = Vec<Result<ReplicationRecord, String>>;

fn run_replication(
    r: usize,
    sample: &ImputedSample,
    pool: &DesignPool,
    settings: &SimSettings,
    active: &[bool],
) -> RepResult {
    let mut rng = stream(settings.seed, &[domain::BOOTSTRAP, r as u64]);
    let m = sample.len();
    let idx: Vec<usize> = (0..settings.n).map(|_| rng.random_range(0..m)).collect();
    let y0: Vec<f64> = idx.iter().map(|&i| sample.y0[i]).collect();
    let y1: Vec<f64> = idx.iter().map(|&i| sample.y1[i]).collect();
    let tau_true = y1.iter().zip(&y0).map(|(a, b)| a - b).sum::<f64>() / settings.n as f64;
    // built from predictions and covariates only
    let inputs = pool.inputs(&idx);
    let keys: Option<Vec<String>> = pool.strata_keys.as_ref().map(|k| idx.iter().map(|&i| k[i].clone()).collect());
    let fingerprint = fingerprint_hex(inputs.fingerprint());
    settings
        .methods
        .iter()
        .enumerate()
        .map(|(mi, spec)| {
            if !active[mi] {
                return Err(String::new());
            }
            let design_seed = derive_seed(settings.seed, &[domain::DESIGN, r as u64, mi as u64]);
            let est = estimate_one(spec, &inputs, keys.as_deref(), &y0, &y1, settings.p, design_seed)?;
            Ok(ReplicationRecord {
                replication: r,
                method: spec.name(),
                tau_hat: est.tau_hat,
                se_hat: est.se_hat,
                tau_true,
                design_fingerprint: fingerprint.clone(),
            })
        })
        .collect()
}

/// Runs `settings.reps` replications. Each draws `n` units with replacement
/// from `sample` on stream `(seed, r)`; design scores come from `pool`,
/// computed once per source unit. Results do not depend on `threads`.
pub fn run_simulation(
    sample: &ImputedSample,
    pool: &DesignPool,
    settings: &SimSettings,
) -> Result<SimulationOutput, HarnessError> {
    validate(sample, pool, settings)?;
    let mut failures: Vec<(String, String)> = Vec::new();
    let active: Vec<bool> = settings
        .methods
        .iter()
        .map(|spec| match precheck(spec, pool) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("method `{}` excluded: {e}", spec.name());
                failures.push((spec.name(), e));
                false
            }
        })
        .collect();

    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| HarnessError::InvalidSettings(e.to_string()))?;
    let per_rep: Vec<RepResult> = threads.install(|| {
        (0..settings.reps).into_par_iter().map(|r| run_replication(r, sample, pool, settings, &active)).collect()
    });

    let mut records = Vec::with_capacity(settings.reps * settings.methods.len());
    for (mi, spec) in settings.methods.iter().enumerate() {
        if !active[mi] {
            continue;
        }
        let mut rows = Vec::with_capacity(settings.reps);
        let mut failed = None;
        for rep in &per_rep {
            match &rep[mi] {
                Ok(rec) => rows.push(rec.clone()),
                Err(e) => {
                    failed = Some(e.clone());
                    break;
                }
            }
        }
        match failed {
            Some(e) => {
                log::warn!("method `{}` excluded: {e}", spec.name());
                failures.push((spec.name(), e));
            }
            None => records.extend(rows),
        }
    }
    records.sort_by_key(|r| r.replication);
    let order: Vec<String> = settings.methods.iter().map(MethodSpec::name).collect();
    let mut comparison = summarize(&records, &order, settings.seed)?;
    comparison.failures = failures;
    Ok(SimulationOutput { records, comparison })
}

/// Percentile interval of the mean squared error from resampled
/// replication-level squared errors.
fn bootstrap_ci(squared_errors: &[f64], seed: u64, method: &str) -> (f64, f64) {
    let k = squared_errors.len();
    let mut rng = stream(seed, &[domain::INTERVAL, hash_str(method)]);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..k).map(|_| squared_errors[rng.random_range(0..k)]).sum::<f64>() / k as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((0.025 * BOOTSTRAP_RESAMPLES as f64).floor() as usize).min(BOOTSTRAP_RESAMPLES - 1);
    let hi = ((0.975 * BOOTSTRAP_RESAMPLES as f64).ceil() as usize - 1).min(BOOTSTRAP_RESAMPLES - 1);
    (means[lo], means[hi])
}

/// Aggregates replication records per method, in `order`. Methods without
/// records are skipped.
pub fn summarize(records: &[ReplicationRecord], order: &[String], seed: u64) -> Result<MethodComparison, HarnessError> {
    let mut rows = Vec::new();
    for method in order {
        let mut mine: Vec<&ReplicationRecord> = records.iter().filter(|r| &r.method == method).collect();
        if mine.is_empty() {
            continue;
        }
        mine.sort_by_key(|r| r.replication);
        let k = mine.len() as f64;
        let sq: Vec<f64> = mine.iter().map(|r| r.error().powi(2)).collect();
        let mse = sq.iter().sum::<f64>() / k;
        let (ci_low, ci_high) = bootstrap_ci(&sq, seed, method);
        let bias = mine.iter().map(|r| r.error()).sum::<f64>() / k;
        let bias_var = if mine.len() > 1 {
            mine.iter().map(|r| (r.error() - bias).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let covered = mine.iter().filter(|r| r.error().abs() <= 1.96 * r.se_hat).count();
        rows.push(MethodSummary {
            method: method.clone(),
            reps: mine.len(),
            mse,
            ci_low,
            ci_high,
            mean_se: mine.iter().map(|r| r.se_hat).sum::<f64>() / k,
            bias,
            bias_se: (bias_var / k).sqrt(),
            coverage: covered as f64 / k,
        });
    }
    Ok(MethodComparison { rows, failures: Vec::new() })
}
