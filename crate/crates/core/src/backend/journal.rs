//! Append-only JSONL journal of every backend call.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ChatResponse, EmbeddingRequest, Embedder, FineTuneJob, FineTuner,
    ModelRef, ModelRole, TokenLogprob,
};
use crate::error::{Error, Result};
use crate::hashing::stable_hash_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    /// One of `chat`, `score`, `embed`, `finetune_start`, `finetune_poll`.
    pub op: String,
    pub model: String,
    pub request_hash: String,
    pub latency_ms: f64,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
    seq: AtomicU64,
}

impl Journal {
    /// Open for appending; sequence numbers continue from existing entries.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let existing = if path.exists() {
            fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .count() as u64
        } else {
            0
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Journal {
            path: path.to_path_buf(),
            file: Mutex::new(file),
            seq: AtomicU64::new(existing),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(
        &self,
        op: &str,
        model: &str,
        request: Value,
        outcome: std::result::Result<Value, String>,
        started: Instant,
    ) {
        let request_hash = stable_hash_hex([request.to_string()]);
        let (response, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        let entry = JournalEntry {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            op: op.to_string(),
            model: model.to_string(),
            request_hash,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            request,
            response,
            error,
        };
        let mut line = serde_json::to_string(&entry).expect("journal entries serialize");
        line.push('\n');
        let mut file = self.file.lock().expect("journal lock poisoned");
        if let Err(e) = file.write_all(line.as_bytes()) {
            log::error!("failed to append to journal {}: {e}", self.path.display());
        }
    }

    pub fn read(path: &Path) -> Result<Vec<JournalEntry>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// Wraps a backend handle and journals each call.
pub struct Journaled<T: ?Sized> {
    inner: Arc<T>,
    journal: Arc<Journal>,
}

impl<T: ?Sized> Journaled<T> {
    pub fn new(inner: Arc<T>, journal: Arc<Journal>) -> Self {
        Journaled { inner, journal }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("journal payloads serialize")
}

fn outcome<T: Serialize>(r: &Result<T>) -> std::result::Result<Value, String> {
    match r {
        Ok(v) => Ok(to_value(v)),
        Err(e) => Err(e.to_string()),
    }
}

impl ChatBackend for Journaled<dyn ChatBackend> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let started = Instant::now();
        let res = self.inner.chat(req);
        self.journal
            .append("chat", &req.model, to_value(req), outcome(&res), started);
        res
    }

    fn score_completion(
        &self,
        model: &str,
        prompt: &str,
        completion: &str,
    ) -> Result<Vec<TokenLogprob>> {
        let started = Instant::now();
        let res = self.inner.score_completion(model, prompt, completion);
        let request = json!({"model": model, "prompt": prompt, "completion": completion});
        self.journal
            .append("score", model, request, outcome(&res), started);
        res
    }

    fn supports_echo_scoring(&self) -> bool {
        self.inner.supports_echo_scoring()
    }
}

impl Embedder for Journaled<dyn Embedder> {
    fn embed(&self, req: &EmbeddingRequest) -> Result<Vec<Vec<f64>>> {
        let started = Instant::now();
        let res = self.inner.embed(req);
        self.journal
            .append("embed", &req.model, to_value(req), outcome(&res), started);
        res
    }
}

impl FineTuner for Journaled<dyn FineTuner> {
    fn start_finetune(
        &self,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob> {
        let started = Instant::now();
        let payload_sha256 = fs::read(training_file)
            .map(|bytes| stable_hash_hex([bytes]))
            .unwrap_or_default();
        let request = json!({
            "base": base,
            "training_file": training_file,
            "payload_sha256": payload_sha256,
            "epochs": epochs,
            "target_role": target,
        });
        let res = self.inner.start_finetune(base, training_file, epochs, target);
        self.journal
            .append("finetune_start", &base.name, request, outcome(&res), started);
        res
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        let started = Instant::now();
        let res = self.inner.poll(job);
        self.journal.append(
            "finetune_poll",
            &job.base.name,
            json!({"job": job.id}),
            outcome(&res),
            started,
        );
        res
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplaySummary {
    pub replayed: usize,
    pub skipped: usize,
    /// Sequence numbers whose replayed output differs from the journal.
    pub mismatched: Vec<u64>,
}

/// Re-issue every successful chat, score and embed call and compare outputs.
pub fn replay(
    entries: &[JournalEntry],
    chat: &dyn ChatBackend,
    embedder: &dyn Embedder,
) -> Result<ReplaySummary> {
    let mut summary = ReplaySummary::default();
    for entry in entries {
        let Some(recorded) = &entry.response else {
            summary.skipped += 1;
            continue;
        };
        let fresh = match entry.op.as_str() {
            "chat" => {
                let req: ChatRequest = serde_json::from_value(entry.request.clone())
                    .map_err(|e| Error::Protocol(format!("journal entry {}: {e}", entry.seq)))?;
                outcome(&chat.chat(&req))
            }
            "score" => {
                let field = |k: &str| entry.request[k].as_str().unwrap_or_default().to_string();
                outcome(&chat.score_completion(
                    &field("model"),
                    &field("prompt"),
                    &field("completion"),
                ))
            }
            "embed" => {
                let req: EmbeddingRequest = serde_json::from_value(entry.request.clone())
                    .map_err(|e| Error::Protocol(format!("journal entry {}: {e}", entry.seq)))?;
                outcome(&embedder.embed(&req))
            }
            _ => {
                summary.skipped += 1;
                continue;
            }
        };
        summary.replayed += 1;
        if fresh.as_ref() != Ok(recorded) {
            summary.mismatched.push(entry.seq);
        }
    }
    Ok(summary)
}
