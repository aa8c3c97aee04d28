//! Model-service contracts: chat completion with logprobs, completion
//! scoring, embeddings and fine-tuning, plus the HTTP and external-command
//! implementations and the request journal.

mod command;
mod http;
pub mod journal;
mod limit;
pub mod payload;
mod retry;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use command::CommandFineTuner;
pub use http::{HttpBackend, HttpConfig};
pub use journal::{Journal, JournalEntry, Journaled};
pub use limit::Semaphore;
pub use payload::{validate_training_file, TrainingExample};
pub use retry::RetryPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Base,
    Warm,
    Evolved,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Base => "base",
            ModelRole::Warm => "warm",
            ModelRole::Evolved => "evolved",
        })
    }
}

/// A model known to a backend. Warm and evolved refs carry the id of the
/// fine-tune job that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    pub role: ModelRole,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<String>,
}

impl ModelRef {
    pub fn base(name: impl Into<String>, backend: impl Into<String>) -> Self {
        ModelRef {
            name: name.into(),
            role: ModelRole::Base,
            backend: backend.into(),
            job: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    /// Sampling seed forwarded to the provider; distinguishes otherwise
    /// identical collaborator requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 512,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Precondition("chat request has no messages".into()));
        }
        if self.model.is_empty() {
            return Err(Error::Precondition("chat request has no model".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Precondition(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: String,
}

impl ChatResponse {
    pub fn logprob_values(&self) -> Option<Vec<f64>> {
        self.token_logprobs
            .as_ref()
            .map(|t| t.iter().map(|t| t.logprob).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub id: String,
    pub base: ModelRef,
    pub training_file: PathBuf,
    pub epochs: u32,
    pub target_role: ModelRole,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FineTuneJob {
    pub fn is_terminal(&self) -> bool {
        matches!(self.status, JobStatus::Succeeded | JobStatus::Failed)
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse>;

    /// Per-token logprobs of `completion` following `prompt`, by teacher
    /// forcing. Backends without echo-scoring return [`Error::Capability`].
    fn score_completion(&self, model: &str, prompt: &str, completion: &str)
        -> Result<Vec<TokenLogprob>>;

    fn supports_echo_scoring(&self) -> bool;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, req: &EmbeddingRequest) -> Result<Vec<Vec<f64>>>;
}

pub trait FineTuner: Send + Sync {
    fn start_finetune(
        &self,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob>;

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob>;
}

pub(crate) fn check_score_args(completion: &str) -> Result<()> {
    if completion.is_empty() {
        return Err(Error::Precondition("completion to score is empty".into()));
    }
    Ok(())
}

pub(crate) fn check_embed_request(req: &EmbeddingRequest) -> Result<()> {
    if req.texts.is_empty() {
        return Err(Error::Precondition("embedding request has no texts".into()));
    }
    Ok(())
}

/// Check that a provider returned one vector per text, all of one positive dimension.
pub(crate) fn check_embeddings(req: &EmbeddingRequest, vectors: &[Vec<f64>]) -> Result<()> {
    if vectors.len() != req.texts.len() {
        return Err(Error::Protocol(format!(
            "expected {} embeddings, got {}",
            req.texts.len(),
            vectors.len()
        )));
    }
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Protocol("embedding dimensions are inconsistent".into()));
    }
    Ok(())
}

/// Poll a job until it reaches a terminal status or the timeout elapses.
pub fn wait_for_job(
    finetuner: &dyn FineTuner,
    job: FineTuneJob,
    interval: Duration,
    timeout: Duration,
) -> Result<FineTuneJob> {
    let started = Instant::now();
    let mut job = job;
    while !job.is_terminal() {
        if started.elapsed() > timeout {
            return Err(Error::FineTune(format!(
                "job {} did not finish within {:?}",
                job.id, timeout
            )));
        }
        std::thread::sleep(interval);
        job = finetuner.poll(&job)?;
    }
    Ok(job)
}

/// The three service handles a pipeline needs.
#[derive(Clone)]
pub struct Services {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
    pub finetuner: Arc<dyn FineTuner>,
    pub embedding_model: String,
    /// Label recorded in [`ModelRef::backend`].
    pub backend_label: String,
}

impl Services {
    pub fn journaled(self, journal: Arc<Journal>) -> Services {
        Services {
            chat: Arc::new(Journaled::new(self.chat, journal.clone())),
            embedder: Arc::new(Journaled::new(self.embedder, journal.clone())),
            finetuner: Arc::new(Journaled::new(self.finetuner, journal)),
            embedding_model: self.embedding_model,
            backend_label: self.backend_label,
        }
    }
}
