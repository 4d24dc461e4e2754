//! Append-only prediction cache persisted as JSON Lines.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PredictionPair;

/// Hex SHA-256 over the rendered prompt, backend tag and model id.
pub fn cache_key(prompt: &str, backend_tag: &str, model_id: &str) -> String {
    let mut h = Sha256::new();
    for part in [prompt, backend_tag, model_id] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    #[serde(flatten)]
    pair: PredictionPair,
}

#[derive(Debug, Default)]
pub struct PredictionCache {
    entries: Mutex<HashMap<String, PredictionPair>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a cache file and loads its entries. A
    /// truncated final line from an interrupted write is skipped.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(entry) => {
                        entries.entry(entry.key).or_insert(entry.pair);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), lineno + 1),
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = std::fs::read(path)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(PredictionCache {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<PredictionPair> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `pair` under `key` unless the key is already present. Returns
    /// the entry that is in the cache afterwards.
    pub fn insert(&self, key: &str, pair: PredictionPair) -> std::io::Result<PredictionPair> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(existing) = entries.get(key) {
            return Ok(existing.clone());
        }
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&CacheLine { key: key.to_string(), pair: pair.clone() })?;
            let mut f = file.lock().expect("cache file lock");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        entries.insert(key.to_string(), pair.clone());
        Ok(pair)
    }
}
