#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};
use stratkit::data::{CovariateSchema, Variable, VariableKind};
use stratkit::predictor::ExperimentContext;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn savings_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        Variable {
            name: "age".into(),
            kind: VariableKind::Numeric,
            description: "Age of the customer".into(),
            units: Some("years".into()),
        },
        Variable {
            name: "gender".into(),
            kind: VariableKind::Categorical,
            description: "Self-reported gender".into(),
            units: None,
        },
        Variable {
            name: "notes".into(),
            kind: VariableKind::Text,
            description: "Free-text notes from the intake interview".into(),
            units: None,
        },
    ])
    .unwrap()
}

pub fn savings_context() -> ExperimentContext {
    ExperimentContext::new(
        "A six-month savings nudge study among adult retail bank customers.",
        "Amount saved over six months, in dollars.",
        "amount saved",
        "Receives the standard monthly newsletter.",
        "Receives a personalized weekly savings reminder.",
        "120",
        "150",
    )
    .unwrap()
}

pub fn numeric_schema_json(names: &[&str]) -> Value {
    json!({
        "variables": names.iter().map(|n| json!({"name": n, "kind": "numeric", "description": format!("covariate {n}")})).collect::<Vec<_>>()
    })
}

pub fn context_json() -> Value {
    serde_json::to_value(savings_context()).unwrap()
}

/// Writes `unit_id,x1,x2[,outcome,treatment]` rows with a deterministic pattern.
pub fn write_numeric_dataset(path: &Path, n: usize, with_outcomes: bool) {
    let mut s = String::from("unit_id,x1,x2");
    if with_outcomes {
        s.push_str(",outcome,treatment");
    }
    s.push('\n');
    for i in 0..n {
        let x1 = ((i * 37) % 101) as f64 / 10.0 - 5.0;
        let x2 = ((i * 53) % 89) as f64 / 8.0 - 5.5;
        s.push_str(&format!("u{i:04},{x1},{x2}"));
        if with_outcomes {
            let t = i % 2;
            let wobble = ((i * 29) % 17) as f64 / 17.0 - 0.5;
            let y = 1.0 + 2.0 * x1 - x2 + 0.8 * t as f64 + wobble;
            s.push_str(&format!(",{y},{t}"));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

pub fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(config).unwrap()).unwrap();
    p
}

pub fn stratkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stratkit")).args(args).env("RUST_LOG", "error").output().unwrap()
}

pub fn run_ok(args: &[&str]) -> Value {
    let out = stratkit(args);
    assert!(
        out.status.success(),
        "stratkit {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Body rows of a commented CSV, header comment removed.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

/// Minimal HTTP server answering every POST with a fixed chat completion.
pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

pub fn spawn_mock_server(completion: &str) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    let body = json!({"choices": [{"message": {"role": "assistant", "content": completion}}]}).to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            let _ = reader.read_exact(&mut buf);
            counter.fetch_add(1, Ordering::SeqCst);
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    MockServer { url, hits }
}

/// A local address with nothing listening on it.
pub fn unreachable_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/v1/chat/completions")
}
