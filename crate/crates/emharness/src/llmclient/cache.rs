//! Append-only response cache keyed by a digest of the full request.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ClientError, CompletionRequest, CompletionResult, TokenUsage};

/// Digest over everything that influences a completion: model, messages,
/// temperature, and output cap. Two requests share a cache slot only if all
/// four agree.
pub fn cache_key(request: &CompletionRequest) -> String {
    let payload = serde_json::json!({
        "model": request.model_id,
        "messages": request.conversation.messages,
        "temperature": request.temperature,
        "max_output_tokens": request.max_output_tokens,
    });
    let mut hasher = Sha256::new();
    hasher.update(payload.to_string().as_bytes());
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_text(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex(&hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model: String,
    temperature: f64,
    max_output_tokens: Option<u32>,
    messages_digest: String,
    response: String,
    usage: TokenUsage,
    latency_secs: f64,
    timestamp: u64,
}

struct CacheState {
    map: HashMap<String, CacheRecord>,
    writer: File,
}

/// Wraps a backend with a JSONL response cache.
///
/// Hits are answered locally with `cached = true` and the originally
/// observed usage and latency, which keeps warmed-up re-runs byte-identical.
/// Misses go to the backend and are appended to the cache file; failures are
/// never cached.
pub struct CachingClient {
    backend: Arc<dyn ChatBackend>,
    path: PathBuf,
    state: Mutex<CacheState>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachingClient {
    pub fn open(backend: Arc<dyn ChatBackend>, cache_path: &Path) -> Result<Self, ClientError> {
        if let Some(parent) = cache_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut map = HashMap::new();
        if cache_path.is_file() {
            let reader = BufReader::new(File::open(cache_path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| ClientError::CacheCorrupted {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                map.insert(record.key.clone(), record);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(cache_path)?;
        Ok(CachingClient {
            backend,
            path: cache_path.to_path_buf(),
            state: Mutex::new(CacheState { map, writer }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn cache_path(&self) -> &Path {
        &self.path
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn entries(&self) -> usize {
        self.state.lock().unwrap().map.len()
    }

    fn lookup(&self, key: &str) -> Option<CompletionResult> {
        let state = self.state.lock().unwrap();
        state.map.get(key).map(|record| CompletionResult {
            text: record.response.clone(),
            usage: record.usage,
            latency_secs: record.latency_secs,
            backend: self.backend.id().to_string(),
            cached: true,
        })
    }

    fn store(
        &self,
        key: String,
        request: &CompletionRequest,
        result: &CompletionResult,
    ) -> Result<(), ClientError> {
        let record = CacheRecord {
            key: key.clone(),
            model: request.model_id.clone(),
            temperature: request.temperature,
            max_output_tokens: request.max_output_tokens,
            messages_digest: digest_text(
                &serde_json::to_string(&request.conversation.messages).expect("serializable"),
            ),
            response: result.text.clone(),
            usage: result.usage,
            latency_secs: result.latency_secs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&record).expect("serializable");
        let mut state = self.state.lock().unwrap();
        state.writer.write_all(line.as_bytes())?;
        state.writer.write_all(b"\n")?;
        state.writer.flush()?;
        state.map.insert(key, record);
        Ok(())
    }
}

impl ChatBackend for CachingClient {
    fn id(&self) -> &str {
        self.backend.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        let key = cache_key(request);
        if let Some(hit) = self.lookup(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let result = self.backend.complete(request)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.store(key, request, &result)?;
        Ok(result)
    }
}
