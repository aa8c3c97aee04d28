//! OpenAI-compatible HTTP client.

use std::fs;
use std::path::Path;
use std::time::Duration;

use reqwest::blocking::{multipart, Client, RequestBuilder};
use serde_json::{json, Value};

use super::limit::Semaphore;
use super::retry::{Attempt, RetryPolicy};
use super::{
    check_embed_request, check_embeddings, check_score_args, validate_training_file, ChatBackend,
    ChatRequest, ChatResponse, EmbeddingRequest, Embedder, FineTuneJob, FineTuner, JobStatus,
    ModelRef, ModelRole, TokenLogprob,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Service root, e.g. `http://127.0.0.1:8000`. A trailing `/v1` is accepted.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Whether the service supports `/v1/completions` with `echo`.
    pub echo_scoring: bool,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            echo_scoring: false,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    root: String,
    client: Client,
    in_flight: Semaphore,
    label: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let root = config
            .base_url
            .trim_end_matches('/')
            .trim_end_matches("/v1")
            .to_string();
        Ok(HttpBackend {
            in_flight: Semaphore::new(config.max_in_flight),
            label: format!("http:{root}"),
            root,
            client,
            config,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{}", self.root, path)
    }

    fn authorized(&self, builder: RequestBuilder) -> RequestBuilder {
        match &self.config.api_key {
            Some(key) => builder.bearer_auth(key),
            None => builder,
        }
    }

    fn send(&self, builder: RequestBuilder) -> Attempt<Value> {
        let _permit = self.in_flight.acquire();
        let response = match self.authorized(builder).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(e.to_string()),
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return Attempt::Retryable(e.to_string()),
        };
        if status.is_success() {
            return match serde_json::from_str(&body) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(Error::Protocol(format!("invalid JSON body: {e}"))),
            };
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retryable(format!("HTTP {status}: {body}"));
        }
        let message = serde_json::from_str::<Value>(&body)
            .ok()
            .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
            .unwrap_or(body);
        Attempt::Fatal(Error::Provider {
            status: status.as_u16(),
            message,
        })
    }

    fn post_json(&self, path: &str, body: &Value, policy: RetryPolicy) -> Result<Value> {
        let url = self.url(path);
        policy.run(|| self.send(self.client.post(&url).json(body)))
    }

    fn get_json(&self, path: &str) -> Result<Value> {
        let url = self.url(path);
        self.config.retry.run(|| self.send(self.client.get(&url)))
    }

    fn parse_job(
        &self,
        v: &Value,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob> {
        let id = v["id"]
            .as_str()
            .ok_or_else(|| Error::Protocol("fine-tune job without id".into()))?
            .to_string();
        let status = match v["status"].as_str().unwrap_or("") {
            "validating_files" | "queued" => JobStatus::Queued,
            "running" => JobStatus::Running,
            "succeeded" => JobStatus::Succeeded,
            "failed" | "cancelled" => JobStatus::Failed,
            other => return Err(Error::Protocol(format!("unknown job status {other:?}"))),
        };
        let result = match (status, v["fine_tuned_model"].as_str()) {
            (JobStatus::Succeeded, Some(name)) => Some(ModelRef {
                name: name.to_string(),
                role: target,
                backend: self.label.clone(),
                job: Some(id.clone()),
            }),
            (JobStatus::Succeeded, None) => {
                return Err(Error::Protocol(format!(
                    "job {id} succeeded without a fine_tuned_model"
                )))
            }
            _ => None,
        };
        Ok(FineTuneJob {
            id,
            base: base.clone(),
            training_file: training_file.to_path_buf(),
            epochs,
            target_role: target,
            status,
            result,
            error: v["error"]["message"].as_str().map(str::to_string),
        })
    }
}

fn parse_chat(v: &Value) -> Result<ChatResponse> {
    let choice = &v["choices"][0];
    if choice.is_null() {
        return Err(Error::Protocol("chat response has no choices".into()));
    }
    let text = choice["message"]["content"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let token_logprobs = match choice["logprobs"]["content"].as_array() {
        Some(items) => Some(
            items
                .iter()
                .map(|item| {
                    Ok(TokenLogprob {
                        token: item["token"].as_str().unwrap_or_default().to_string(),
                        logprob: item["logprob"]
                            .as_f64()
                            .ok_or_else(|| Error::Protocol("logprob is not a number".into()))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(ChatResponse {
        text,
        token_logprobs,
        finish_reason: choice["finish_reason"]
            .as_str()
            .unwrap_or("stop")
            .to_string(),
    })
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let mut body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "logprobs": req.want_logprobs,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post_json("chat/completions", &body, self.config.retry)?;
        parse_chat(&v)
    }

    fn score_completion(
        &self,
        model: &str,
        prompt: &str,
        completion: &str,
    ) -> Result<Vec<TokenLogprob>> {
        check_score_args(completion)?;
        if !self.config.echo_scoring {
            return Err(Error::Capability(format!(
                "{} does not support echo-scoring; use generation-time logprobs",
                self.label
            )));
        }
        let body = json!({
            "model": model,
            "prompt": format!("{prompt}{completion}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let v = self.post_json("completions", &body, self.config.retry)?;
        let lp = &v["choices"][0]["logprobs"];
        let (Some(tokens), Some(values), Some(offsets)) = (
            lp["tokens"].as_array(),
            lp["token_logprobs"].as_array(),
            lp["text_offset"].as_array(),
        ) else {
            return Err(Error::Protocol("echo response lacks logprobs".into()));
        };
        let prompt_chars = prompt.chars().count() as u64;
        let mut out = Vec::new();
        for ((token, value), offset) in tokens.iter().zip(values).zip(offsets) {
            if offset.as_u64().unwrap_or(0) < prompt_chars {
                continue;
            }
            out.push(TokenLogprob {
                token: token.as_str().unwrap_or_default().to_string(),
                logprob: value
                    .as_f64()
                    .ok_or_else(|| Error::Protocol("completion token without logprob".into()))?,
            });
        }
        if out.is_empty() {
            return Err(Error::Protocol("echo response covered no completion tokens".into()));
        }
        Ok(out)
    }

    fn supports_echo_scoring(&self) -> bool {
        self.config.echo_scoring
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, req: &EmbeddingRequest) -> Result<Vec<Vec<f64>>> {
        check_embed_request(req)?;
        let body = json!({"model": req.model, "input": req.texts});
        let v = self.post_json("embeddings", &body, self.config.retry)?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| Error::Protocol("embedding response lacks data".into()))?;
        let mut indexed: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let vector = item["embedding"]
                    .as_array()
                    .ok_or_else(|| Error::Protocol("embedding is not an array".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| Error::Protocol("embedding component".into()))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok((item["index"].as_u64().unwrap_or(pos as u64), vector))
            })
            .collect::<Result<_>>()?;
        indexed.sort_by_key(|(i, _)| *i);
        let vectors: Vec<Vec<f64>> = indexed.into_iter().map(|(_, v)| v).collect();
        check_embeddings(req, &vectors)?;
        Ok(vectors)
    }
}

impl FineTuner for HttpBackend {
    fn start_finetune(
        &self,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob> {
        validate_training_file(training_file)?;
        let bytes = fs::read(training_file).map_err(|e| Error::io(training_file, e))?;
        let file_name = training_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "train.jsonl".into());

        // uploads and job creation are not idempotent: single attempt
        let url = self.url("files");
        let upload = RetryPolicy::none().run(|| {
            let form = multipart::Form::new()
                .text("purpose", "fine-tune")
                .part(
                    "file",
                    multipart::Part::bytes(bytes.clone()).file_name(file_name.clone()),
                );
            self.send(self.client.post(&url).multipart(form))
        })?;
        let file_id = upload["id"]
            .as_str()
            .ok_or_else(|| Error::Protocol("file upload returned no id".into()))?;

        let body = json!({
            "model": base.name,
            "training_file": file_id,
            "hyperparameters": {"n_epochs": epochs},
        });
        let v = self.post_json("fine_tuning/jobs", &body, RetryPolicy::none())?;
        self.parse_job(&v, base, training_file, epochs, target)
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        let v = self.get_json(&format!("fine_tuning/jobs/{}", job.id))?;
        self.parse_job(&v, &job.base, &job.training_file, job.epochs, job.target_role)
    }
}
