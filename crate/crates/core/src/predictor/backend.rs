//! Prediction backends: a remote chat-completion endpoint and two local mocks.

use std::collections::BTreeMap;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use super::prompt::format_prediction;
use crate::data::{CovariateSchema, UnitRecord, VariableKind};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Connection failures, timeouts, 5xx and 429 responses.
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("response carries no completion text")]
    NoCompletion,
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub struct PredictionRequest<'a> {
    pub prompt: &'a str,
    pub unit: &'a UnitRecord,
    pub schema: &'a CovariateSchema,
}

pub trait Backend: Send + Sync {
    fn tag(&self) -> &str;
    fn model_id(&self) -> &str;
    /// True when calls leave the process.
    fn is_remote(&self) -> bool {
        false
    }
    /// Returns the raw completion text for one prompt.
    fn complete(&self, request: &PredictionRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "STRATKIT_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

/// Minimal chat-completion client: one user message, temperature 0.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend { config, api_key, agent }
    }

    pub fn request_body(&self, prompt: &str) -> Json {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        })
    }
}

/// Pulls completion text out of the common response shapes.
pub fn extract_completion(body: &Json) -> Option<String> {
    let candidates = [
        body.pointer("/choices/0/message/content"),
        body.pointer("/choices/0/text"),
        body.pointer("/content/0/text"),
        body.pointer("/output_text"),
        body.pointer("/completion"),
        body.pointer("/text"),
    ];
    candidates.into_iter().flatten().find_map(|v| v.as_str().map(str::to_string))
}

impl Backend for RemoteBackend {
    fn tag(&self) -> &str {
        "remote"
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn is_remote(&self) -> bool {
        true
    }

    fn complete(&self, request: &PredictionRequest<'_>) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(request.prompt))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("status {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Rejected { status, body: text });
        }
        let body: Json = serde_json::from_str(&text).map_err(|e| BackendError::Transport(e.to_string()))?;
        extract_completion(&body).ok_or(BackendError::NoCompletion)
    }
}

/// Coefficients for the linear mock: `[control, treatment]` per term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub intercept: [f64; 2],
    #[serde(default)]
    pub coefficients: BTreeMap<String, [f64; 2]>,
}

/// `y_d = intercept_d + sum_j coef_jd * x_j` over numeric covariates.
pub struct MockLinear {
    spec: LinearSpec,
    model_id: String,
}

impl MockLinear {
    pub fn new(spec: LinearSpec) -> Self {
        let digest = rng::hash_str(&serde_json::to_string(&spec).expect("spec serializes"));
        MockLinear { model_id: format!("mock-linear:{digest:016x}"), spec }
    }

    pub fn predict(&self, unit: &UnitRecord, schema: &CovariateSchema) -> (f64, f64) {
        let mut y = self.spec.intercept;
        for var in schema.variables.iter().filter(|v| v.kind == VariableKind::Numeric) {
            if let (Some(c), Some(x)) = (self.spec.coefficients.get(&var.name), unit.value(&var.name)) {
                let x = x.as_f64().unwrap_or(0.0);
                y[0] += c[0] * x;
                y[1] += c[1] * x;
            }
        }
        (y[0], y[1])
    }
}

impl Backend for MockLinear {
    fn tag(&self) -> &str {
        "mock-linear"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &PredictionRequest<'_>) -> Result<String, BackendError> {
        let (y0, y1) = self.predict(request.unit, request.schema);
        Ok(format_prediction(y0, y1))
    }
}

/// Standard-normal predictions keyed by the prompt text, unrelated to any
/// outcome.
pub struct MockNoise {
    seed: u64,
    model_id: String,
}

impl MockNoise {
    pub fn new(seed: u64) -> Self {
        MockNoise { seed, model_id: format!("mock-noise:{seed}") }
    }

    pub fn draw(&self, prompt: &str) -> (f64, f64) {
        let mut r = rng::stream(self.seed, &[rng::domain::MOCK_NOISE, rng::hash_str(prompt)]);
        (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))
    }
}

impl Backend for MockNoise {
    fn tag(&self) -> &str {
        "mock-noise"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &PredictionRequest<'_>) -> Result<String, BackendError> {
        let (y0, y1) = self.draw(request.prompt);
        Ok(format_prediction(y0, y1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Remote(RemoteConfig),
    MockLinear(LinearSpec),
    MockNoise { seed: u64 },
}

impl BackendConfig {
    pub fn build(&self) -> Box<dyn Backend> {
        match self {
            BackendConfig::Remote(c) => Box::new(RemoteBackend::new(c.clone())),
            BackendConfig::MockLinear(spec) => Box::new(MockLinear::new(spec.clone())),
            BackendConfig::MockNoise { seed } => Box::new(MockNoise::new(*seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_completion_from_known_shapes() {
        let openai = json!({"choices":[{"message":{"role":"assistant","content":"hi"}}]});
        let anthropic = json!({"content":[{"type":"text","text":"hey"}]});
        assert_eq!(extract_completion(&openai).as_deref(), Some("hi"));
        assert_eq!(extract_completion(&anthropic).as_deref(), Some("hey"));
        assert_eq!(extract_completion(&json!({"x": 1})), None);
    }

    #[test]
    fn request_body_pins_temperature_zero() {
        let b = RemoteBackend::new(RemoteConfig {
            endpoint: "http://127.0.0.1:9/v1".into(),
            model: "m-1".into(),
            api_key_env: "STRATKIT_TEST_UNSET_KEY".into(),
            timeout_secs: 1,
        });
        let body = b.request_body("hello");
        assert_eq!(body["temperature"], json!(0));
        assert_eq!(body["model"], json!("m-1"));
        assert_eq!(body["messages"][0]["content"], json!("hello"));
    }

    #[test]
    fn mock_noise_is_seeded() {
        let a = MockNoise::new(3);
        assert_eq!(a.draw("p"), a.draw("p"));
        assert_ne!(a.draw("p"), a.draw("q"));
        assert_ne!(a.draw("p"), MockNoise::new(4).draw("p"));
    }

    #[test]
    fn backend_config_tags() {
        let c: BackendConfig = serde_json::from_str(
            r#"{"kind":"mock-linear","intercept":[1,2],"coefficients":{"age":[0.5,0.25]}}"#,
        )
        .unwrap();
        assert_eq!(c.build().tag(), "mock-linear");
        let c: BackendConfig = serde_json::from_str(r#"{"kind":"mock-noise","seed":9}"#).unwrap();
        assert_eq!(c.build().model_id(), "mock-noise:9");
    }
}
