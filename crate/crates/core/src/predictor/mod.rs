//! Predicted potential outcomes per unit, with caching, retries and bounded
//! concurrency.

pub mod backend;
pub mod cache;
pub mod prompt;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateSchema, Dataset, UnitRecord};
pub use backend::{Backend, BackendConfig, BackendError, PredictionRequest};
pub use cache::{cache_key, PredictionCache};
pub use prompt::{parse_prediction, render_prompt, ExperimentContext, ParseError, PromptError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub unit_id: String,
    pub y0_hat: f64,
    pub y1_hat: f64,
    pub backend_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: BackendError },
    #[error("unparseable response after {attempts} attempts: {source}")]
    ParseFailure { attempts: u32, source: ParseError },
    #[error("cache write failed: {0}")]
    Cache(String),
    #[error("invalid parallelism 0")]
    InvalidParallelism,
    #[error("{} unit(s) failed: {}", .0.len(), summarize(.0))]
    Units(Vec<(String, PredictError)>),
}

fn summarize(failures: &[(String, PredictError)]) -> String {
    failures.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; ")
}

impl PredictError {
    pub fn failed_units(&self) -> Vec<&str> {
        match self {
            PredictError::Units(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
            _ => Vec::new(),
        }
    }

    /// True when the failure came from the backend rather than from inputs.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            PredictError::BackendUnavailable { .. } | PredictError::ParseFailure { .. } => true,
            PredictError::Units(v) => v.iter().any(|(_, e)| e.is_backend_failure()),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictStats {
    pub cache_hits: usize,
    pub backend_calls: usize,
    pub network_calls: usize,
    pub parse_failures: usize,
}

/// Ties a backend, a cache and the experiment context together.
pub struct Predictor<'a> {
    pub backend: &'a dyn Backend,
    pub cache: &'a PredictionCache,
    pub ctx: &'a ExperimentContext,
    pub template: Option<&'a str>,
    pub retry: RetryPolicy,
    audit: Option<Mutex<File>>,
    cache_hits: AtomicUsize,
    backend_calls: AtomicUsize,
    parse_failures: AtomicUsize,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    unit_id: &'a str,
    backend_tag: &'a str,
    model_id: &'a str,
    attempt: u32,
    error: String,
    raw_response: &'a str,
}

impl<'a> Predictor<'a> {
    pub fn new(backend: &'a dyn Backend, cache: &'a PredictionCache, ctx: &'a ExperimentContext) -> Self {
        Predictor {
            backend,
            cache,
            ctx,
            template: None,
            retry: RetryPolicy::default(),
            audit: None,
            cache_hits: AtomicUsize::new(0),
            backend_calls: AtomicUsize::new(0),
            parse_failures: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_template(mut self, template: &'a str) -> Self {
        self.template = Some(template);
        self
    }

    /// Unparseable raw responses are appended to this JSONL file.
    pub fn with_audit_file(mut self, path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.audit = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn stats(&self) -> PredictStats {
        let backend_calls = self.backend_calls.load(Ordering::SeqCst);
        PredictStats {
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            backend_calls,
            network_calls: if self.backend.is_remote() { backend_calls } else { 0 },
            parse_failures: self.parse_failures.load(Ordering::SeqCst),
        }
    }

    pub fn prompt_for(&self, unit: &UnitRecord, schema: &CovariateSchema) -> Result<String, PromptError> {
        match self.template {
            Some(t) => prompt::render_with_template(t, unit, schema, self.ctx),
            None => render_prompt(unit, schema, self.ctx),
        }
    }

    pub fn predict_unit(&self, unit: &UnitRecord, schema: &CovariateSchema) -> Result<PredictionPair, PredictError> {
        let prompt = self.prompt_for(unit, schema)?;
        let key = cache_key(&prompt, self.backend.tag(), self.backend.model_id());
        if let Some(mut hit) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            hit.unit_id = unit.unit_id.clone();
            return Ok(hit);
        }

        let request = PredictionRequest { prompt: &prompt, unit, schema };
        let attempts = self.retry.max_attempts.max(1);
        let mut last_error = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 2));
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let raw = match self.backend.complete(&request) {
                Ok(raw) => raw,
                Err(e) if e.is_retryable() => {
                    log::warn!("unit {}: attempt {attempt}: {e}", unit.unit_id);
                    last_error = Some(PredictError::BackendUnavailable { attempts: attempt, last: e });
                    continue;
                }
                Err(e) => return Err(PredictError::BackendUnavailable { attempts: attempt, last: e }),
            };
            match parse_prediction(&raw) {
                Ok((y0_hat, y1_hat)) => {
                    let pair = PredictionPair {
                        unit_id: unit.unit_id.clone(),
                        y0_hat,
                        y1_hat,
                        backend_tag: self.backend.tag().to_string(),
                        raw_response: self.backend.is_remote().then_some(raw),
                    };
                    let mut stored = self
                        .cache
                        .insert(&key, pair)
                        .map_err(|e| PredictError::Cache(e.to_string()))?;
                    stored.unit_id = unit.unit_id.clone();
                    return Ok(stored);
                }
                Err(e) => {
                    self.parse_failures.fetch_add(1, Ordering::SeqCst);
                    self.record_failure(unit, attempt, &e, &raw);
                    last_error = Some(PredictError::ParseFailure { attempts: attempt, source: e });
                }
            }
        }
        Err(last_error.expect("at least one attempt"))
    }

    fn record_failure(&self, unit: &UnitRecord, attempt: u32, error: &ParseError, raw: &str) {
        let Some(audit) = &self.audit else { return };
        let line = AuditLine {
            unit_id: &unit.unit_id,
            backend_tag: self.backend.tag(),
            model_id: self.backend.model_id(),
            attempt,
            error: error.to_string(),
            raw_response: raw,
        };
        let mut f = audit.lock().expect("audit lock");
        if let Ok(s) = serde_json::to_string(&line) {
            if let Err(e) = writeln!(f, "{s}") {
                log::error!("cannot write audit record: {e}");
            }
        }
    }

    /// One pair per unit in dataset order, with at most `parallelism`
    /// backend requests in flight. Every success is cached before the
    /// batch result is known.
    pub fn predict_dataset(&self, dataset: &Dataset, parallelism: usize) -> Result<Vec<PredictionPair>, PredictError> {
        if parallelism == 0 {
            return Err(PredictError::InvalidParallelism);
        }
        let n = dataset.len();
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<PredictionPair, PredictError>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..parallelism.min(n.max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let result = self.predict_unit(&dataset.units[i], &dataset.schema);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });

        let mut pairs = Vec::with_capacity(n);
        let mut failures = Vec::new();
        for (unit, slot) in dataset.units.iter().zip(slots) {
            match slot.into_inner().expect("slot lock").expect("every unit visited") {
                Ok(p) => pairs.push(p),
                Err(e) => failures.push((unit.unit_id.clone(), e)),
            }
        }
        if failures.is_empty() {
            Ok(pairs)
        } else {
            Err(PredictError::Units(failures))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::backend::{LinearSpec, MockLinear};
    use super::*;
    use crate::data::{read_dataset, Variable, VariableKind};
    use std::collections::BTreeMap;
    use std::sync::atomic::AtomicU32;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            Variable { name: "x1".into(), kind: VariableKind::Numeric, description: "first".into(), units: None },
            Variable { name: "x2".into(), kind: VariableKind::Numeric, description: "second".into(), units: None },
        ])
        .unwrap()
    }

    fn dataset() -> Dataset {
        read_dataset("unit_id,x1,x2\n1,1.5,2\n2,-3,0.25\n3,4,4\n".as_bytes(), &schema()).unwrap()
    }

    fn ctx() -> ExperimentContext {
        ExperimentContext::new("bg", "outcome", "score", "control arm", "treated arm", "1", "2").unwrap()
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1) }
    }

    fn linear() -> MockLinear {
        let mut coefficients = BTreeMap::new();
        coefficients.insert("x1".to_string(), [2.0, 3.0]);
        coefficients.insert("x2".to_string(), [-1.0, 0.5]);
        MockLinear::new(LinearSpec { intercept: [1.0, 1.5], coefficients })
    }

    /// Scripted backend: fails for listed units, counts calls, optionally
    /// delays earlier units longer so completion order is reversed.
    struct Scripted {
        fail_unit: Option<String>,
        garbage_first: bool,
        reverse_delay: bool,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new() -> Self {
            Scripted { fail_unit: None, garbage_first: false, reverse_delay: false, calls: AtomicU32::new(0) }
        }
    }

    impl Backend for Scripted {
        fn tag(&self) -> &str {
            "scripted"
        }
        fn model_id(&self) -> &str {
            "scripted-1"
        }
        fn is_remote(&self) -> bool {
            true
        }
        fn complete(&self, req: &PredictionRequest<'_>) -> Result<String, BackendError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_unit.as_deref() == Some(req.unit.unit_id.as_str()) {
                return Err(BackendError::Transport("connection refused".into()));
            }
            if self.garbage_first && call == 0 {
                return Ok("I'd rather not say.".into());
            }
            if self.reverse_delay {
                let id: u64 = req.unit.unit_id.parse().unwrap();
                std::thread::sleep(Duration::from_millis(60 * (4 - id)));
            }
            let x1 = req.unit.value("x1").unwrap().as_f64().unwrap();
            Ok(prompt::format_prediction(x1, x1 + 1.0))
        }
    }

    #[test]
    fn second_call_hits_cache() {
        let backend = Scripted::new();
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c).with_retry(fast());
        let ds = dataset();
        let first = p.predict_unit(&ds.units[0], &ds.schema).unwrap();
        let second = p.predict_unit(&ds.units[0], &ds.schema).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(p.stats().cache_hits, 1);
        assert_eq!(p.stats().network_calls, 1);
    }

    #[test]
    fn mock_linear_matches_closed_form() {
        let backend = linear();
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c);
        let ds = dataset();
        let pairs = p.predict_dataset(&ds, 2).unwrap();
        // y0 = 1 + 2 x1 - x2, y1 = 1.5 + 3 x1 + 0.5 x2
        let expected = [(1.0 + 3.0 - 2.0, 1.5 + 4.5 + 1.0), (1.0 - 6.0 - 0.25, 1.5 - 9.0 + 0.125), (1.0 + 8.0 - 4.0, 1.5 + 12.0 + 2.0)];
        for (pair, (y0, y1)) in pairs.iter().zip(expected) {
            assert_eq!((pair.y0_hat, pair.y1_hat), (y0, y1));
        }
        assert_eq!(p.stats().network_calls, 0);
        assert_eq!(p.stats().backend_calls, 3);
    }

    #[test]
    fn prose_response_is_parse_failure_and_audited() {
        struct Prose;
        impl Backend for Prose {
            fn tag(&self) -> &str {
                "prose"
            }
            fn model_id(&self) -> &str {
                "p"
            }
            fn complete(&self, _: &PredictionRequest<'_>) -> Result<String, BackendError> {
                Ok("The individual will probably save a lot.".into())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("failures.jsonl");
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&Prose, &cache, &c).with_retry(fast()).with_audit_file(&audit).unwrap();
        let ds = dataset();
        let err = p.predict_unit(&ds.units[0], &ds.schema).unwrap_err();
        assert_eq!(err, PredictError::ParseFailure { attempts: 3, source: ParseError::MissingPredictionBlock });
        let logged = std::fs::read_to_string(&audit).unwrap();
        assert_eq!(logged.lines().count(), 3);
        assert!(logged.contains("probably save a lot"));
        assert!(cache.is_empty());
    }

    #[test]
    fn malformed_first_response_is_reasked() {
        let backend = Scripted { garbage_first: true, ..Scripted::new() };
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c).with_retry(fast());
        let ds = dataset();
        let pair = p.predict_unit(&ds.units[0], &ds.schema).unwrap();
        assert_eq!((pair.y0_hat, pair.y1_hat), (1.5, 2.5));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn all_cached_dataset_makes_no_calls() {
        let backend = Scripted::new();
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let ds = dataset();
        Predictor::new(&backend, &cache, &c).predict_dataset(&ds, 1).unwrap();
        let p = Predictor::new(&backend, &cache, &c);
        let pairs = p.predict_dataset(&ds, 3).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(p.stats().network_calls, 0);
        assert_eq!(p.stats().cache_hits, 3);
    }

    #[test]
    fn partial_failure_lists_unit_and_keeps_successes() {
        let backend = Scripted { fail_unit: Some("2".into()), ..Scripted::new() };
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c).with_retry(fast());
        let ds = dataset();
        let err = p.predict_dataset(&ds, 2).unwrap_err();
        assert_eq!(err.failed_units(), vec!["2"]);
        assert!(err.is_backend_failure());
        assert_eq!(cache.len(), 2);

        let healthy = Scripted::new();
        let p = Predictor::new(&healthy, &cache, &c);
        p.predict_dataset(&ds, 2).unwrap();
        assert_eq!(healthy.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn output_order_follows_dataset_order() {
        let backend = Scripted { reverse_delay: true, ..Scripted::new() };
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c);
        let ds = dataset();
        let pairs = p.predict_dataset(&ds, 3).unwrap();
        let ids: Vec<&str> = pairs.iter().map(|p| p.unit_id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "3"]);
        assert_eq!(pairs[1].y0_hat, -3.0);
    }

    #[test]
    fn cache_key_tracks_prompt_inputs() {
        let backend = linear();
        let c = ctx();
        let ds = dataset();
        let cache = PredictionCache::in_memory();
        let p = Predictor::new(&backend, &cache, &c);
        let base = p.prompt_for(&ds.units[0], &ds.schema).unwrap();
        let key = |prompt: &str, model: &str| cache_key(prompt, "mock-linear", model);

        let mut reordered = ds.schema.clone();
        reordered.variables.reverse();
        assert_ne!(base, p.prompt_for(&ds.units[0], &reordered).unwrap());

        let mut changed = ds.units[0].clone();
        changed.values.insert("x1".into(), crate::data::Value::Number(1.25));
        assert_ne!(base, p.prompt_for(&changed, &ds.schema).unwrap());

        let other_ctx = ExperimentContext::new("bg2", "outcome", "score", "control arm", "treated arm", "1", "2").unwrap();
        let p2 = Predictor::new(&backend, &cache, &other_ctx);
        assert_ne!(base, p2.prompt_for(&ds.units[0], &ds.schema).unwrap());

        assert_ne!(key(&base, "a"), key(&base, "b"));
    }

    #[test]
    fn zero_parallelism_rejected() {
        let backend = linear();
        let cache = PredictionCache::in_memory();
        let c = ctx();
        let p = Predictor::new(&backend, &cache, &c);
        assert_eq!(p.predict_dataset(&dataset(), 0).unwrap_err(), PredictError::InvalidParallelism);
    }
}
