//! The HTTP client against the mock OpenAI-compatible server.

mod common;

use std::sync::Arc;
use std::time::Duration;

use semievol_core::backend::{
    wait_for_job, ChatBackend, ChatRequest, Embedder, EmbeddingRequest, FineTuner, HttpBackend,
    HttpConfig, JobStatus, ModelRole, RetryPolicy,
};
use semievol_core::config::{services_from_config, BackendKind, FineTuneMode};
use semievol_core::pipeline::training_examples;
use semievol_core::prompting::{render_task, TemplateSet};
use semievol_core::selection::scoring_prompt;
use semievol_core::simlab::server::ServerOptions;
use semievol_core::simlab::{MockServer, SimBackend, WorldSpec, SIM_BASE, SIM_EMBEDDING, SIM_WARM};
use semievol_core::Error;

fn small_world(seed: u64) -> WorldSpec {
    WorldSpec {
        clusters: 3,
        per_cluster: 20,
        ..WorldSpec::default()
    }
    .with_seed(seed)
}

fn sim(seed: u64) -> Arc<SimBackend> {
    Arc::new(SimBackend::new(small_world(seed)).unwrap())
}

fn client(server: &MockServer, key: Option<&str>, attempts: u32) -> HttpBackend {
    let mut cfg = HttpConfig::new(server.base_url());
    cfg.api_key = key.map(str::to_string);
    cfg.retry = RetryPolicy {
        attempts,
        initial_backoff: Duration::from_millis(1),
    };
    cfg.echo_scoring = true;
    HttpBackend::new(cfg).unwrap()
}

fn first_request(seed: u64) -> ChatRequest {
    let task = small_world(seed).tasks().unwrap().records[0].clone();
    let mut req = ChatRequest::new(SIM_WARM, render_task(&TemplateSet::embedded(), &task, &[]).unwrap());
    req.want_logprobs = true;
    req
}

#[test]
fn chat_over_http_equals_in_process() {
    let backend = sim(1);
    let server = MockServer::start(backend.clone().services(), ServerOptions::default()).unwrap();
    let http = client(&server, None, 1);
    let req = first_request(1);
    assert_eq!(http.chat(&req).unwrap(), backend.chat(&req).unwrap());
    let mut seeded = req.clone();
    seeded.temperature = 1.0;
    seeded.seed = Some(99);
    assert_eq!(http.chat(&seeded).unwrap(), backend.chat(&seeded).unwrap());
}

#[test]
fn bearer_token_is_required_when_configured() {
    let server = MockServer::start(
        sim(2).services(),
        ServerOptions {
            api_key: Some("sk-test".into()),
            ..ServerOptions::default()
        },
    )
    .unwrap();
    let req = first_request(2);
    match client(&server, None, 1).chat(&req) {
        Err(Error::Provider { status: 401, .. }) => {}
        other => panic!("expected 401, got {other:?}"),
    }
    assert!(matches!(client(&server, Some("wrong"), 1).chat(&req), Err(Error::Provider { status: 401, .. })));
    assert!(client(&server, Some("sk-test"), 1).chat(&req).is_ok());
}

#[test]
fn transient_failures_are_retried() {
    let server = MockServer::start(
        sim(3).services(),
        ServerOptions {
            fail_first: 2,
            ..ServerOptions::default()
        },
    )
    .unwrap();
    assert!(client(&server, None, 3).chat(&first_request(3)).is_ok());
    assert_eq!(server.request_count(), 3);
}

#[test]
fn retries_are_bounded() {
    let server = MockServer::start(
        sim(3).services(),
        ServerOptions {
            fail_first: 5,
            ..ServerOptions::default()
        },
    )
    .unwrap();
    let err = client(&server, None, 2).chat(&first_request(3)).unwrap_err();
    assert!(
        matches!(err, Error::Provider { status: 503, .. } | Error::Transport { .. }),
        "{err:?}"
    );
    assert_eq!(server.request_count(), 2);
}

#[test]
fn malformed_requests_are_not_retried() {
    let server = MockServer::start(sim(4).services(), ServerOptions::default()).unwrap();
    let mut req = first_request(4);
    req.model = "no-such-model".into();
    assert!(client(&server, None, 4).chat(&req).is_err());
    assert_eq!(server.request_count(), 1);
}

#[test]
fn echo_scoring_returns_completion_tokens_only() {
    let backend = sim(5);
    let server = MockServer::start(backend.clone().services(), ServerOptions::default()).unwrap();
    let http = client(&server, None, 1);
    let task = small_world(5).tasks().unwrap().records[7].clone();
    let prompt = scoring_prompt(&TemplateSet::embedded(), &task).unwrap();
    let completion = "Checking each option.\nAnswer: C";
    let remote = http.score_completion(SIM_WARM, &prompt, completion).unwrap();
    let local = backend.score_completion(SIM_WARM, &prompt, completion).unwrap();
    assert_eq!(remote, local);
    let joined: String = remote.iter().map(|t| t.token.as_str()).collect();
    assert_eq!(joined, completion);
}

#[test]
fn echo_scoring_can_be_disabled() {
    let server = MockServer::start(sim(5).services(), ServerOptions::default()).unwrap();
    let mut cfg = HttpConfig::new(server.base_url());
    cfg.echo_scoring = false;
    let http = HttpBackend::new(cfg).unwrap();
    assert!(matches!(http.score_completion(SIM_WARM, "p", "Answer: A"), Err(Error::Capability(_))));
}

#[test]
fn embeddings_keep_input_order() {
    let backend = sim(6);
    let server = MockServer::start(backend.clone().services(), ServerOptions::default()).unwrap();
    let texts: Vec<String> = small_world(6).tasks().unwrap().iter().take(9).map(|t| t.question.clone()).collect();
    let req = EmbeddingRequest {
        model: SIM_EMBEDDING.into(),
        texts,
    };
    assert_eq!(client(&server, None, 1).embed(&req).unwrap(), backend.embed(&req).unwrap());
}

#[test]
fn hosted_finetune_uploads_and_polls() {
    let backend = sim(7);
    let server = MockServer::start(backend.clone().services(), ServerOptions::default()).unwrap();
    let http = client(&server, None, 1);
    let dir = tempfile::tempdir().unwrap();
    let data = small_world(7).tasks().unwrap();
    let examples = training_examples(&TemplateSet::embedded(), &data).unwrap();
    let path = dir.path().join("train.jsonl");
    std::fs::write(&path, semievol_core::backend::payload::to_jsonl(&examples)).unwrap();

    let base = backend.base_model();
    let job = http.start_finetune(&base, &path, 2, ModelRole::Warm).unwrap();
    let done = wait_for_job(&http, job, Duration::from_millis(5), Duration::from_secs(10)).unwrap();
    assert_eq!(done.status, JobStatus::Succeeded);
    let model = done.result.unwrap();
    assert!(model.name.starts_with(&format!("{SIM_BASE}-ft-")), "{}", model.name);

    // Trained on gold labels only, so every cluster improves.
    for c in 0..3 {
        assert!(backend.model_accuracy(&model.name, c).unwrap() > backend.model_accuracy(SIM_BASE, c).unwrap());
    }
    let mut req = first_request(7);
    req.model = model.name.clone();
    assert!(http.chat(&req).is_ok());
}

#[test]
fn hosted_pipeline_matches_in_process_run() {
    let local_dir = tempfile::tempdir().unwrap();
    let mut local = common::sim_config(local_dir.path(), 11);
    local.world = small_world(11);
    let local_state = common::run_sim(&local, 1);

    let backend = Arc::new(SimBackend::new(small_world(11)).unwrap());
    let server = MockServer::start(backend.services(), ServerOptions::default()).unwrap();
    let remote_dir = tempfile::tempdir().unwrap();
    let mut remote = local.clone();
    remote.workdir = remote_dir.path().to_path_buf();
    remote.backend.kind = BackendKind::Http;
    remote.backend.http.base_url = server.base_url();
    remote.backend.http.echo_scoring = true;
    remote.backend.finetune.mode = FineTuneMode::Hosted;
    remote.backend.finetune.poll_interval_secs = 0;
    remote.backend.base_model = Some(SIM_BASE.into());
    remote.backend.embedding_model = Some(SIM_EMBEDDING.into());
    assert!(services_from_config(&remote).is_ok());
    let remote_state = common::run_sim(&remote, 1);

    assert_eq!(local_state.history[0].accuracy, remote_state.history[0].accuracy);
    assert_eq!(local_state.history[0].selected, remote_state.history[0].selected);
    for name in ["selected.jsonl", "pseudo.jsonl", "eval_report.json"] {
        let a = std::fs::read(local_dir.path().join(name)).unwrap();
        let b = std::fs::read(remote_dir.path().join(name)).unwrap();
        assert!(a == b, "{name} differs between in-process and hosted runs");
    }
}
