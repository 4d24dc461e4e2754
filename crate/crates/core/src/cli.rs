//! Command implementations behind the `stratkit` binary. Each command
//! returns a JSON summary that the binary prints to stdout.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::config::{ConfigError, LoadedConfig, ScoreSource, SyntheticConfig};
use crate::data::{feature_matrix, load_dataset, strata_keys, Dataset, FeatureMatrix, UnitRecord, Value, Variable, VariableKind};
use crate::data::CovariateSchema;
use crate::harness::{
    emit_report, impute_counterfactuals, read_replications, run_simulation, summarize, write_replications, DesignPool,
    HarnessError, ImputedSample, MethodComparison, MethodSpec, ReportFormat, SimSettings,
};
use crate::predictor::{PredictError, PredictionCache, Predictor, RetryPolicy};
use crate::randomization::{assign_within_strata, RandError};
use crate::rng::{domain, stream};
use crate::scoring::{score_units, ScoredUnit};
use crate::stratification::{form_strata, DesignInputs, StratError};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("prediction backend failed: {0}")]
    Backend(String),
    #[error("design infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o failure: {e}"))
    }
}

impl From<StratError> for CliError {
    fn from(e: StratError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<RandError> for CliError {
    fn from(e: RandError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        if e.is_backend_failure() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidDgp(_) | HarnessError::InvalidSettings(_) | HarnessError::UnknownBaseline(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn load_configured_dataset(cfg: &LoadedConfig) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path().ok_or_else(|| config_err("no dataset configured"))?;
    let schema = cfg.config.schema.as_ref().ok_or_else(|| config_err("no schema configured"))?;
    load_dataset(&path, schema).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn design_covariates(cfg: &LoadedConfig, schema: &CovariateSchema) -> Vec<String> {
    cfg.config.design.covariates.clone().unwrap_or_else(|| schema.design_variables())
}

/// Runs the configured backend over `dataset`, going through the cache.
fn predict_scores(cfg: &LoadedConfig, dataset: &Dataset) -> Result<(Vec<ScoredUnit>, Json), CliError> {
    let ctx = cfg.config.context.as_ref().ok_or_else(|| config_err("no experiment context configured"))?;
    let backend = cfg.backend_config()?.build();
    fs::create_dir_all(cfg.output_dir())?;
    let cache = PredictionCache::open(&cfg.cache_path())?;
    let template = match &cfg.config.template {
        Some(p) => Some(fs::read_to_string(cfg.resolve(p)).map_err(|e| config_err(format!("template: {e}")))?),
        None => None,
    };
    let retry = RetryPolicy {
        max_attempts: cfg.config.retry.max_attempts,
        base_delay: Duration::from_millis(cfg.config.retry.base_delay_ms),
    };
    let mut predictor =
        Predictor::new(backend.as_ref(), &cache, ctx).with_retry(retry).with_audit_file(&cfg.output("failures.jsonl"))?;
    if let Some(t) = &template {
        predictor = predictor.with_template(t);
    }
    let result = predictor.predict_dataset(dataset, cfg.config.parallelism);
    let stats = predictor.stats();
    let mut summary = json!({
        "units": dataset.len(),
        "cache_hits": stats.cache_hits,
        "backend_calls": stats.backend_calls,
        "network_calls": stats.network_calls,
        "parse_failures": stats.parse_failures,
    });
    let pairs = match result {
        Ok(pairs) => pairs,
        Err(e) => {
            let failed = e.failed_units();
            log::error!("{} of {} units failed: {}", failed.len(), dataset.len(), failed.join(", "));
            return Err(e.into());
        }
    };
    summary["failures"] = json!(0);
    let scores = score_units(&pairs, cfg.config.allocation).map_err(config_err)?;
    Ok((scores, summary))
}

fn write_commented_csv<T: serde::Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<(), CliError> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "# {header}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_commented_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let mut body = String::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

/// `predict`: scores every unit and writes `scores.csv`. Any unit failure
/// leaves no scores file behind.
pub fn cmd_predict(cfg: &LoadedConfig) -> Result<Json, CliError> {
    let dataset = load_configured_dataset(cfg)?;
    let scores_path = cfg.output("scores.csv");
    if scores_path.exists() {
        fs::remove_file(&scores_path)?;
    }
    let (scores, mut summary) = predict_scores(cfg, &dataset)?;
    write_commented_csv(&scores_path, &cfg.header(), &scores)?;
    summary["command"] = json!("predict");
    Ok(summary)
}

#[derive(serde::Serialize)]
struct StratumRow<'a> {
    stratum_id: usize,
    unit_id: &'a str,
    g_hat: Option<f64>,
}

#[derive(serde::Serialize)]
struct AssignmentRow<'a> {
    unit_id: &'a str,
    stratum_id: Option<usize>,
    treatment: u8,
    method_tag: &'a str,
    seed_fingerprint: &'a str,
}

/// `design`: forms strata from `scores.csv` and the configured covariates,
/// then randomizes within them.
pub fn cmd_design(cfg: &LoadedConfig) -> Result<Json, CliError> {
    let method = cfg.config.design.strata_method()?;
    let scores_path = cfg.output("scores.csv");
    let scored: Option<Vec<ScoredUnit>> = if scores_path.exists() {
        Some(read_commented_csv(&scores_path)?)
    } else if method.needs_scores() {
        return Err(config_err(format!("{} not found; run `predict` first", scores_path.display())));
    } else {
        None
    };
    let dataset = if method.needs_features() || scored.is_none() { Some(load_configured_dataset(cfg)?) } else { None };

    let unit_ids: Vec<String> = match (&dataset, &scored) {
        (Some(d), _) => d.unit_ids(),
        (None, Some(s)) => s.iter().map(|u| u.unit_id.clone()).collect(),
        (None, None) => unreachable!("one of the two sources is loaded"),
    };
    let scores = match &scored {
        Some(s) => {
            let by_id: HashMap<&str, f64> = s.iter().map(|u| (u.unit_id.as_str(), u.g_hat)).collect();
            let aligned = unit_ids
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| config_err(format!("unit `{id}` has no score; rerun `predict`")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Some(aligned)
        }
        None => None,
    };
    let features = match (&dataset, method.needs_features()) {
        (Some(d), true) => Some(feature_matrix(d, &design_covariates(cfg, &d.schema)).map_err(config_err)?),
        _ => None,
    };
    let inputs = DesignInputs { scores, features };
    let strata = form_strata(&inputs, &method)?;
    let p = cfg.config.allocation;
    let assignments = assign_within_strata(&strata, &unit_ids, p, cfg.config.seed)?;

    fs::create_dir_all(cfg.output_dir())?;
    let header = cfg.header();
    let mut stratum_rows = Vec::with_capacity(unit_ids.len());
    for s in &strata.strata {
        for &m in &s.members {
            stratum_rows.push(StratumRow {
                stratum_id: s.stratum_id,
                unit_id: &unit_ids[m],
                g_hat: inputs.scores.as_ref().map(|g| g[m]),
            });
        }
    }
    write_commented_csv(&cfg.output("strata.csv"), &header, &stratum_rows)?;
    let assignment_rows: Vec<AssignmentRow> = assignments
        .iter()
        .map(|a| AssignmentRow {
            unit_id: &a.unit_id,
            stratum_id: a.stratum_id,
            treatment: a.treatment,
            method_tag: &strata.method_tag,
            seed_fingerprint: &a.seed_fingerprint,
        })
        .collect();
    write_commented_csv(&cfg.output("assignments.csv"), &header, &assignment_rows)?;

    Ok(json!({
        "command": "design",
        "method": strata.method_tag,
        "units": unit_ids.len(),
        "strata": strata.len(),
        "treated": assignments.iter().filter(|a| a.treatment == 1).count(),
        "lambda": strata.lambda,
        "total_cost": strata.total_cost,
        "leftover": strata.leftover.map(|i| unit_ids[i].clone()),
        "seed_fingerprint": crate::rng::seed_fingerprint(cfg.config.seed),
    }))
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter().map(|x| (x - mean) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn synthetic_dataset(fm: &FeatureMatrix, ids: &[String]) -> Result<Dataset, CliError> {
    let schema = CovariateSchema::new(
        fm.names
            .iter()
            .map(|n| Variable { name: n.clone(), kind: VariableKind::Numeric, description: n.clone(), units: None })
            .collect(),
    )
    .map_err(config_err)?;
    let units = ids
        .iter()
        .enumerate()
        .map(|(i, id)| UnitRecord {
            unit_id: id.clone(),
            values: fm.names.iter().cloned().zip(fm.row(i).iter().map(|&x| Value::Number(x))).collect(),
            observed: None,
        })
        .collect();
    Dataset::new(schema, units).map_err(config_err)
}

fn synthetic_inputs(
    cfg: &LoadedConfig,
    syn: &SyntheticConfig,
    notes: &mut Vec<String>,
) -> Result<(ImputedSample, DesignPool, Json), CliError> {
    let draw = syn.dgp.sample(syn.pool_size, cfg.config.seed);
    let n = draw.g_star.len();
    let mut prediction = Json::Null;
    let scores = match &syn.scores {
        ScoreSource::Oracle => draw.g_star.clone(),
        ScoreSource::Noise => {
            let mut rng = stream(cfg.config.seed, &[domain::SCORES]);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
        ScoreSource::Correlated { rho } => {
            let mut rng = stream(cfg.config.seed, &[domain::SCORES]);
            let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (zg, zn) = (standardize(&draw.g_star), standardize(&noise));
            let w = (1.0 - rho * rho).max(0.0).sqrt();
            zg.iter().zip(&zn).map(|(a, b)| rho * a + w * b).collect()
        }
        ScoreSource::Backend => {
            let fm = draw.sample.covariates.as_ref().expect("synthetic draws carry covariates");
            let dataset = synthetic_dataset(fm, &draw.sample.unit_ids)?;
            let (scored, summary) = predict_scores(cfg, &dataset)?;
            prediction = summary;
            scored.into_iter().map(|s| s.g_hat).collect()
        }
    };
    let d = &syn.dgp;
    notes.push(format!(
        "ground truth: synthetic linear process, dim {}, noise sd {}, pool of {} units; theoretical paired/simple variance ratio {:.6}",
        d.dim,
        d.noise_sd,
        syn.pool_size,
        d.theoretical_ratio()?
    ));
    let pool = DesignPool { scores: Some(scores), features: draw.sample.covariates.clone(), strata_keys: None };
    Ok((draw.sample, pool, prediction))
}

fn observed_inputs(cfg: &LoadedConfig, notes: &mut Vec<String>) -> Result<(ImputedSample, DesignPool, Json), CliError> {
    let dataset = load_configured_dataset(cfg)?;
    if !dataset.has_observations() {
        return Err(config_err(
            "the dataset has no observed outcomes and no synthetic process is configured; add outcome and treatment columns or `simulation.synthetic`",
        ));
    }
    let covariates = design_covariates(cfg, &dataset.schema);
    let features = if covariates.is_empty() {
        None
    } else {
        Some(feature_matrix(&dataset, &covariates).map_err(config_err)?)
    };
    let (y, t): (Vec<f64>, Vec<u8>) = dataset
        .units
        .iter()
        .map(|u| {
            let o = u.observed.as_ref().expect("checked above");
            (o.outcome, u8::from(o.treated))
        })
        .unzip();
    let sample = impute_counterfactuals(&y, &t, features.as_ref(), dataset.unit_ids())?;
    notes.push(format!(
        "ground truth: imputed counterfactuals from a per-arm linear regression on {} covariate column(s){}",
        features.as_ref().map_or(0, FeatureMatrix::n_cols),
        if sample.fallback_used { "; covariates were degenerate so arm means were used" } else { "" }
    ));

    let mut prediction = Json::Null;
    let scores = if cfg.config.backend.is_some() {
        let (scored, summary) = predict_scores(cfg, &dataset)?;
        prediction = summary;
        Some(scored.into_iter().map(|s| s.g_hat).collect())
    } else {
        notes.push("no prediction backend configured; score-based methods were excluded".into());
        None
    };
    let keys = if cfg.config.design.strata_variables.is_empty() {
        None
    } else {
        Some(strata_keys(&dataset, &cfg.config.design.strata_variables).map_err(config_err)?)
    };
    Ok((sample, DesignPool { scores, features, strata_keys: keys }, prediction))
}

fn interval_note() -> String {
    format!(
        "ci_low and ci_high: 95% percentile bootstrap of the MSE over replications ({} resamples)",
        crate::harness::simulate::BOOTSTRAP_RESAMPLES
    )
}

fn write_reports(cfg: &LoadedConfig, comparison: &MethodComparison, notes: &[String]) -> Result<(), CliError> {
    let header = cfg.header();
    let baselines = &cfg.config.simulation.baselines;
    emit_report(comparison, baselines, ReportFormat::Csv, &cfg.output("report.csv"), Some(&header), notes)?;
    emit_report(comparison, baselines, ReportFormat::Markdown, &cfg.output("report.md"), Some(&header), notes)?;
    Ok(())
}

fn comparison_json(comparison: &MethodComparison) -> Json {
    json!({
        "methods": comparison.rows,
        "excluded": comparison.failures.iter().map(|(m, e)| json!({"method": m, "error": e})).collect::<Vec<_>>(),
    })
}

/// `simulate`: Monte Carlo comparison of the configured methods on a
/// synthetic process or on an imputed version of the dataset.
pub fn cmd_simulate(cfg: &LoadedConfig) -> Result<Json, CliError> {
    let sim = &cfg.config.simulation;
    let mut notes = vec![interval_note()];
    let (sample, pool, prediction) = match &sim.synthetic {
        Some(syn) => synthetic_inputs(cfg, syn, &mut notes)?,
        None => observed_inputs(cfg, &mut notes)?,
    };
    let settings = SimSettings {
        methods: sim.methods.clone(),
        reps: sim.reps,
        n: sim.eval_n(sample.len()),
        p: cfg.config.allocation,
        seed: cfg.config.seed,
        threads: cfg.config.threads,
    };
    notes.push(format!("{} replications of {} units drawn with replacement", settings.reps, settings.n));
    let out = run_simulation(&sample, &pool, &settings)?;
    fs::create_dir_all(cfg.output_dir())?;
    write_replications(&out.records, &cfg.output("replications.csv"), Some(&cfg.header()))?;
    write_reports(cfg, &out.comparison, &notes)?;
    let mut summary = comparison_json(&out.comparison);
    summary["command"] = json!("simulate");
    summary["reps"] = json!(settings.reps);
    summary["n"] = json!(settings.n);
    summary["true_tau"] = json!(sample.true_tau());
    if !prediction.is_null() {
        summary["prediction"] = prediction;
    }
    Ok(summary)
}

/// `report`: rebuilds `report.csv` and `report.md` from `replications.csv`.
pub fn cmd_report(cfg: &LoadedConfig) -> Result<Json, CliError> {
    let path = cfg.output("replications.csv");
    if !path.exists() {
        return Err(config_err(format!("{} not found; run `simulate` first", path.display())));
    }
    let records = read_replications(&path)?;
    let mut order: Vec<String> = cfg.config.simulation.methods.iter().map(MethodSpec::name).collect();
    for r in &records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    let comparison = summarize(&records, &order, cfg.config.seed)?;
    let mut notes = vec![interval_note()];
    for m in &order {
        if comparison.get(m).is_none() {
            notes.push(format!("`{m}` has no replications on file"));
        }
    }
    write_reports(cfg, &comparison, &notes)?;
    let mut summary = comparison_json(&comparison);
    summary["command"] = json!("report");
    Ok(summary)
}
