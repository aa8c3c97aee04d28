//! OpenAI-compatible HTTP front for any [`Services`], for exercising the
//! wire layer against deterministic backends.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::{Multipart, Path as UrlPath, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::backend::{ChatMessage, ChatRequest, EmbeddingRequest, FineTuneJob, JobStatus, ModelRef, ModelRole, Services};
use crate::error::{Error, Result};
use crate::selection::SCORING_DELIMITER;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Require `Authorization: Bearer <key>` when set.
    pub api_key: Option<String>,
    /// Answer the first `fail_first` requests with 503.
    pub fail_first: usize,
    /// Where uploaded training files are kept; a fresh temp dir by default.
    pub upload_dir: Option<PathBuf>,
}

struct AppState {
    services: Services,
    api_key: Option<String>,
    fail_first: usize,
    seen: AtomicUsize,
    files: Mutex<HashMap<String, PathBuf>>,
    jobs: Mutex<HashMap<String, FineTuneJob>>,
    upload_dir: PathBuf,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": {"message": self.1, "type": "invalid_request_error"}}))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Provider { status, .. } => StatusCode::from_u16(*status).unwrap_or(StatusCode::BAD_GATEWAY),
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            Error::Simulation(_) | Error::Capability(_) | Error::FineTune(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn gate(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let n = state.seen.fetch_add(1, Ordering::SeqCst);
    if n < state.fail_first {
        return ApiError(StatusCode::SERVICE_UNAVAILABLE, "injected fault".into()).into_response();
    }
    if let Some(key) = &state.api_key {
        let expected = format!("Bearer {key}");
        let ok = req
            .headers()
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == expected);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or invalid bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn chat_completions(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult {
    let messages: Vec<ChatMessage> =
        serde_json::from_value(body["messages"].clone()).map_err(|e| bad(format!("messages: {e}")))?;
    let req = ChatRequest {
        model: body["model"].as_str().ok_or_else(|| bad("model is required"))?.to_string(),
        messages,
        temperature: body["temperature"].as_f64().unwrap_or(1.0),
        max_tokens: body["max_tokens"]
            .as_u64()
            .or_else(|| body["max_completion_tokens"].as_u64())
            .unwrap_or(512) as u32,
        want_logprobs: body["logprobs"].as_bool().unwrap_or(false),
        seed: body["seed"].as_u64(),
    };
    let chat = state.services.chat.clone();
    let model = req.model.clone();
    let resp = blocking(move || chat.chat(&req)).await?;
    let logprobs = resp.token_logprobs.map(|lps| {
        json!({"content": lps.iter().map(|t| json!({"token": t.token, "logprob": t.logprob, "top_logprobs": []})).collect::<Vec<_>>()})
    });
    Ok(Json(json!({
        "id": format!("chatcmpl-{}", state.seen.load(Ordering::SeqCst)),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": resp.text},
            "logprobs": logprobs,
            "finish_reason": resp.finish_reason,
        }],
    })))
}

async fn completions(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult {
    if body["echo"].as_bool() != Some(true) || body["max_tokens"].as_u64() != Some(0) {
        return Err(bad("only echo scoring (echo=true, max_tokens=0) is supported"));
    }
    let model = body["model"].as_str().ok_or_else(|| bad("model is required"))?.to_string();
    let full = body["prompt"].as_str().ok_or_else(|| bad("prompt must be a string"))?.to_string();
    let cut = full
        .rfind(SCORING_DELIMITER)
        .map(|i| i + SCORING_DELIMITER.len())
        .ok_or_else(|| bad("prompt lacks the response delimiter"))?;
    let (prompt, completion) = (full[..cut].to_string(), full[cut..].to_string());
    let chat = state.services.chat.clone();
    let (m, p, c) = (model.clone(), prompt.clone(), completion);
    let scored = blocking(move || chat.score_completion(&m, &p, &c)).await?;
    let mut offset = prompt.chars().count();
    let mut tokens = vec![json!(prompt)];
    let mut values = vec![Value::Null];
    let mut offsets = vec![json!(0)];
    for t in &scored {
        tokens.push(json!(t.token));
        values.push(json!(t.logprob));
        offsets.push(json!(offset));
        offset += t.token.chars().count();
    }
    Ok(Json(json!({
        "object": "text_completion",
        "model": model,
        "choices": [{
            "index": 0,
            "text": full,
            "logprobs": {"tokens": tokens, "token_logprobs": values, "text_offset": offsets},
            "finish_reason": "length",
        }],
    })))
}

async fn embeddings(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult {
    let texts: Vec<String> = match &body["input"] {
        Value::String(s) => vec![s.clone()],
        v => serde_json::from_value(v.clone()).map_err(|e| bad(format!("input: {e}")))?,
    };
    let req = EmbeddingRequest {
        model: body["model"].as_str().ok_or_else(|| bad("model is required"))?.to_string(),
        texts,
    };
    let embedder = state.services.embedder.clone();
    let model = req.model.clone();
    let vectors = blocking(move || embedder.embed(&req)).await?;
    let data: Vec<Value> = vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v}))
        .collect();
    Ok(Json(json!({"object": "list", "model": model, "data": data})))
}

async fn upload(State(state): State<Arc<AppState>>, mut form: Multipart) -> ApiResult {
    let mut purpose = None;
    let mut file = None;
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name() {
            Some("purpose") => purpose = Some(field.text().await.map_err(|e| bad(e.to_string()))?),
            Some("file") => {
                let name = field.file_name().unwrap_or("upload.jsonl").to_string();
                file = Some((name, field.bytes().await.map_err(|e| bad(e.to_string()))?));
            }
            _ => {}
        }
    }
    let (name, bytes) = file.ok_or_else(|| bad("multipart form lacks a file part"))?;
    let id = {
        let mut files = state.files.lock().unwrap();
        let id = format!("file-{}", files.len() + 1);
        let path = state.upload_dir.join(format!("{id}.jsonl"));
        std::fs::write(&path, &bytes).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        files.insert(id.clone(), path);
        id
    };
    Ok(Json(json!({
        "id": id,
        "object": "file",
        "bytes": bytes.len(),
        "filename": name,
        "purpose": purpose.unwrap_or_default(),
    })))
}

fn job_json(job: &FineTuneJob) -> Value {
    let status = match job.status {
        JobStatus::Queued => "queued",
        JobStatus::Running => "running",
        JobStatus::Succeeded => "succeeded",
        JobStatus::Failed => "failed",
    };
    json!({
        "id": job.id,
        "object": "fine_tuning.job",
        "model": job.base.name,
        "status": status,
        "fine_tuned_model": job.result.as_ref().map(|m| m.name.clone()),
        "hyperparameters": {"n_epochs": job.epochs},
        "error": job.error.as_ref().map(|m| json!({"message": m})),
    })
}

async fn create_job(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult {
    let model = body["model"].as_str().ok_or_else(|| bad("model is required"))?.to_string();
    let file_id = body["training_file"].as_str().ok_or_else(|| bad("training_file is required"))?;
    let path = state
        .files
        .lock()
        .unwrap()
        .get(file_id)
        .cloned()
        .ok_or_else(|| bad(format!("unknown file {file_id}")))?;
    let epochs = body["hyperparameters"]["n_epochs"].as_u64().unwrap_or(1) as u32;
    let finetuner = state.services.finetuner.clone();
    let base = ModelRef::base(model, "remote");
    let job = blocking(move || finetuner.start_finetune(&base, &path, epochs, ModelRole::Warm)).await?;
    let out = job_json(&job);
    state.jobs.lock().unwrap().insert(job.id.clone(), job);
    Ok(Json(out))
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let job = state
        .jobs
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    let finetuner = state.services.finetuner.clone();
    let job = blocking(move || finetuner.poll(&job)).await?;
    let out = job_json(&job);
    state.jobs.lock().unwrap().insert(id, job);
    Ok(Json(out))
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/completions", post(completions))
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/files", post(upload))
        .route("/v1/fine_tuning/jobs", post(create_job))
        .route("/v1/fine_tuning/jobs/{id}", get(get_job))
        .layer(middleware::from_fn_with_state(state.clone(), gate))
        .with_state(state)
}

fn app_state(services: Services, opts: ServerOptions) -> Result<(Arc<AppState>, bool)> {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let (upload_dir, owned) = match opts.upload_dir {
        Some(d) => (d, false),
        None => (
            std::env::temp_dir().join(format!(
                "semievol-mock-{}-{}",
                std::process::id(),
                NEXT.fetch_add(1, Ordering::SeqCst)
            )),
            true,
        ),
    };
    std::fs::create_dir_all(&upload_dir).map_err(|e| Error::io(&upload_dir, e))?;
    Ok((
        Arc::new(AppState {
            services,
            api_key: opts.api_key,
            fail_first: opts.fail_first,
            seen: AtomicUsize::new(0),
            files: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            upload_dir,
        }),
        owned,
    ))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start async runtime: {e}")))
}

/// A server on an ephemeral localhost port, stopped on drop.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    owns_dir: bool,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(services: Services, opts: ServerOptions) -> Result<Self> {
        let (state, owns_dir) = app_state(services, opts)?;
        let app = router(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = match runtime() {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::bind("127.0.0.1:0").await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = ready_tx.send(Err(Error::io("127.0.0.1:0", e)));
                        return;
                    }
                };
                let _ = ready_tx.send(listener.local_addr().map_err(|e| Error::io("127.0.0.1:0", e)));
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        let addr = ready_rx
            .recv()
            .map_err(|_| Error::Config("mock server thread exited early".into()))??;
        Ok(MockServer {
            addr,
            state,
            owns_dir,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, including rejected ones.
    pub fn request_count(&self) -> usize {
        self.state.seen.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if self.owns_dir {
            let _ = std::fs::remove_dir_all(&self.state.upload_dir);
        }
    }
}

/// Serve until the process is killed.
pub fn serve(services: Services, opts: ServerOptions, addr: SocketAddr) -> Result<()> {
    let (state, _) = app_state(services, opts)?;
    let app = router(state);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("mock server listening on http://{}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
        axum::serve(listener, app)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}
