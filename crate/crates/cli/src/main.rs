//! Command-line driver over a working directory.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 backend or I/O
//! failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use semievol_core::backend::ModelRole;
use semievol_core::collab::Ablation;
use semievol_core::config::{services_from_config, BackendKind, FineTuneMode, SIM_REGISTRY_FILE};
use semievol_core::data::load_jsonl;
use semievol_core::pipeline::{Pipeline, PipelineState, Stage, STATE_FILE};
use semievol_core::selection::TauSource;
use semievol_core::simlab::server::{serve, ServerOptions};
use semievol_core::simlab::SimBackend;
use semievol_core::{Dataset, Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "semievol", version, about = "Semi-supervised fine-tuning with collaborative pseudo-labels")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print results, and errors, as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Print the stage plan without calling any backend.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Source dataset (JSONL).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Selection percentile in (0, 100].
    #[arg(long, global = true, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<u32>,
    #[arg(long, global = true, value_parser = parse_enum::<TauSource>)]
    tau_source: Option<TauSource>,
    #[arg(long, global = true)]
    numeric_tol: Option<f64>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true, value_parser = parse_enum::<Ablation>)]
    ablation: Option<Ablation>,
    /// `simulated` or `http`.
    #[arg(long, global = true, value_parser = parse_enum::<BackendKind>)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    base_model: Option<String>,
    #[arg(long, global = true)]
    embedding_model: Option<String>,
    /// `simulated`, `hosted` or `command`.
    #[arg(long, global = true, value_parser = parse_enum::<FineTuneMode>)]
    finetune_mode: Option<FineTuneMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the input into labeled, unlabeled and test sets.
    Split,
    /// Fine-tune the base model on the labeled set.
    Warmup,
    /// Build the retrieval index, run collaborators and self-justify.
    Infer,
    /// Score pseudo-labels and keep the confident ones.
    Select,
    /// Fine-tune the base model on labeled plus selected data.
    Finetune,
    /// Run one full round through evaluation.
    Evolve,
    /// Run several rounds, folding selections into the labeled set.
    Iterate {
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Evaluate models on the test set.
    Eval {
        /// Comma-separated roles among base, warm, evolved.
        #[arg(long, value_delimiter = ',', value_parser = parse_enum::<ModelRole>)]
        models: Vec<ModelRole>,
        /// Prompt variants (original plus paraphrases).
        #[arg(long)]
        variants: Option<usize>,
    },
    /// Write a synthetic task world, or serve the simulated API over HTTP.
    Simlab {
        /// Where to write the generated tasks.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        per_cluster: Option<usize>,
        #[arg(long)]
        serve: bool,
        #[arg(long, default_value = "127.0.0.1:8000")]
        addr: SocketAddr,
        /// Environment variable holding a bearer token the server requires.
        #[arg(long)]
        api_key_env: Option<String>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|_| format!("unrecognized value {s:?}"))
}

fn resolve(global: &Global) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = &global.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.world.oracle.seed = seed;
    }
    let o = &global.overrides;
    let m = &mut cfg.method;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(m.n, o.n);
    set!(m.k, o.k);
    set!(m.theta, o.theta);
    set!(m.epochs, o.epochs);
    set!(m.tau_source, o.tau_source);
    set!(m.numeric_tol, o.numeric_tol);
    set!(m.concurrency, o.concurrency);
    set!(m.ablation, o.ablation);
    set!(cfg.backend.kind, o.backend);
    set!(cfg.backend.http.base_url, o.base_url);
    set!(cfg.backend.finetune.mode, o.finetune_mode);
    if o.base_model.is_some() {
        cfg.backend.base_model = o.base_model.clone();
    }
    if o.embedding_model.is_some() {
        cfg.backend.embedding_model = o.embedding_model.clone();
    }
    if o.input.is_some() {
        cfg.data.input = o.input.clone();
    }
    Ok(cfg)
}

fn source_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.input, cfg.backend.kind) {
        (Some(path), _) => Ok(load_jsonl(path)?),
        (None, BackendKind::Simulated) => Ok(cfg.world.tasks()?),
        (None, BackendKind::Http) => Err(Error::Config("data.input is required with the http backend".into()).into()),
    }
}

fn open(cfg: &RunConfig) -> Result<Pipeline> {
    let (services, base) = services_from_config(cfg)?;
    Ok(Pipeline::open(cfg.clone(), services, base)?)
}

/// Load the run state, splitting the input first when the workdir is fresh.
fn state_or_split(p: &Pipeline, cfg: &RunConfig) -> Result<PipelineState> {
    if p.has_state() {
        return Ok(p.load_state()?);
    }
    log::info!("no run in {}; splitting input first", cfg.workdir.display());
    Ok(p.init_from_dataset(&source_dataset(cfg)?)?)
}

fn stage_target(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::Warmup => Stage::Warmed,
        Command::Infer => Stage::Justified,
        Command::Select => Stage::Selected,
        Command::Finetune => Stage::Evolved,
        Command::Evolve | Command::Iterate { .. } => Stage::Evaluated,
        _ => return None,
    })
}

fn summary(state: &PipelineState) -> Value {
    json!({
        "round": state.round,
        "stage": state.stage,
        "models": state.models,
        "history": state.history,
        "stopped": state.stopped,
    })
}

fn dry_run(cli: &Cli, cfg: &RunConfig) -> Result<Value> {
    let state_path = cfg.workdir.join(STATE_FILE);
    let state: Option<PipelineState> = if state_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&state_path)?).context("reading run state")?)
    } else {
        None
    };
    let plan = match (&cli.command, stage_target(&cli.command)) {
        (Command::Iterate { rounds }, Some(target)) => {
            Pipeline::plan(state.as_ref(), target, rounds.unwrap_or(cfg.method.rounds))
        }
        (_, Some(target)) => Pipeline::plan(state.as_ref(), target, state.as_ref().map_or(1, |s| s.round)),
        (Command::Split, None) => vec!["split input into labeled/unlabeled/test".to_string()],
        (Command::Eval { .. }, None) => vec!["evaluate the requested models on the test set".to_string()],
        _ => vec!["generate the synthetic task world".to_string()],
    };
    Ok(json!({"dry_run": true, "plan": plan}))
}

fn run(cli: &Cli) -> Result<Value> {
    let mut cfg = resolve(&cli.global)?;
    if let Command::Simlab { clusters, per_cluster, .. } = &cli.command {
        if let Some(c) = clusters {
            cfg.world.clusters = *c;
        }
        if let Some(p) = per_cluster {
            cfg.world.per_cluster = *p;
        }
    }
    if let Command::Iterate { rounds: Some(r) } = &cli.command {
        cfg.method.rounds = *r;
    }
    if let Command::Eval { models, variants } = &cli.command {
        if !models.is_empty() {
            cfg.method.eval_targets = models.clone();
        }
        if let Some(v) = variants {
            cfg.method.eval_variants = *v;
        }
    }
    cfg.validate()?;
    if cli.global.dry_run {
        return dry_run(cli, &cfg);
    }

    match &cli.command {
        Command::Simlab { out, serve: serving, addr, api_key_env, .. } => simlab(&cfg, out.as_deref(), *serving, *addr, api_key_env.as_deref()),
        Command::Split => {
            let p = open(&cfg)?;
            let state = p.init_from_dataset(&source_dataset(&cfg)?)?;
            let count = |name: &str| load_jsonl(&cfg.workdir.join(name)).map(|d| d.len());
            Ok(json!({
                "workdir": cfg.workdir,
                "labeled": count("labeled.jsonl")?,
                "unlabeled": count("unlabeled.jsonl")?,
                "test": count("test.jsonl")?,
                "round": state.round,
            }))
        }
        Command::Eval { .. } => {
            let p = open(&cfg)?;
            let mut state = state_or_split(&p, &cfg)?;
            if state.stage == Stage::Evolved {
                p.step(&mut state)?;
                return Ok(summary(&state));
            }
            let bundle = p.run_evaluation(&state, &cfg.method.eval_targets)?;
            let path = cfg.workdir.join(format!("eval_r{}_{}.json", state.round, state.stage.name()));
            std::fs::write(&path, serde_json::to_string_pretty(&bundle)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(json!({
                "report": path,
                "accuracy": bundle.reports.iter().map(|(k, r)| (k.clone(), json!(r.accuracy))).collect::<serde_json::Map<_, _>>(),
            }))
        }
        Command::Iterate { .. } => {
            let p = open(&cfg)?;
            let mut state = state_or_split(&p, &cfg)?;
            p.iterate(&mut state, cfg.method.rounds)?;
            Ok(summary(&state))
        }
        cmd => {
            let target = stage_target(cmd).expect("stage command");
            let p = open(&cfg)?;
            let mut state = state_or_split(&p, &cfg)?;
            if state.stage >= target {
                log::info!("round {} is already at {}", state.round, state.stage.name());
            }
            p.run_until(&mut state, target)?;
            Ok(summary(&state))
        }
    }
}

fn simlab(cfg: &RunConfig, out: Option<&Path>, serving: bool, addr: SocketAddr, key_env: Option<&str>) -> Result<Value> {
    let mut result = json!({"clusters": cfg.world.clusters, "per_cluster": cfg.world.per_cluster, "seed": cfg.world.oracle.seed});
    if let Some(out) = out {
        let tasks = cfg.world.tasks()?;
        tasks.write_jsonl(out)?;
        result["tasks"] = json!(tasks.len());
        result["out"] = json!(out);
    }
    if serving {
        std::fs::create_dir_all(&cfg.workdir)?;
        let backend = SimBackend::new(cfg.world.clone())?.with_registry(&cfg.workdir.join(SIM_REGISTRY_FILE))?;
        let api_key = match key_env {
            Some(var) => Some(std::env::var(var).with_context(|| format!("{var} is not set"))?),
            None => None,
        };
        let opts = ServerOptions {
            api_key,
            upload_dir: Some(cfg.workdir.join("uploads")),
            ..ServerOptions::default()
        };
        log::info!("serving the simulated API on http://{addr}");
        serve(Arc::new(backend).services(), opts, addr)?;
    }
    Ok(result)
}

/// 1 for bad input or configuration, 2 for backend and I/O failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None if err.chain().any(|e| e.is::<serde_json::Error>()) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(value) => {
            let text = if cli.global.json {
                serde_json::to_string_pretty(&value).expect("summary serializes") + "\n"
            } else {
                human(&value)
            };
            // A closed pipe is not worth a panic.
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            if cli.global.json {
                let kind = err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or("other", Error::kind);
                let line = json!({"error": {"kind": kind, "message": describe(&err), "exit_code": code}});
                let _ = writeln!(std::io::stdout(), "{line}");
            }
            eprintln!("error: {}", describe(&err));
            ExitCode::from(code)
        }
    }
}

/// The error chain without repeating sources already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn human(value: &Value) -> String {
    let mut out = String::new();
    if let Some(plan) = value["plan"].as_array() {
        for (i, step) in plan.iter().enumerate() {
            let _ = writeln!(out, "{:>2}. {}", i + 1, step.as_str().unwrap_or_default());
        }
        return out;
    }
    if let Some(history) = value["history"].as_array() {
        for r in history {
            let accs = r["accuracy"]
                .as_object()
                .map(|m| m.iter().map(|(k, v)| format!("{k}={:.4}", v.as_f64().unwrap_or(0.0))).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "round {}: labeled {} pool {} selected {} | {accs}",
                r["round"], r["labeled"], r["unlabeled"], r["selected"]
            );
        }
        let _ = writeln!(out, "round {} at stage {}", value["round"], value["stage"].as_str().unwrap_or_default());
        if let Some(reason) = value["stopped"].as_str() {
            let _ = writeln!(out, "stopped: {reason}");
        }
        return out;
    }
    serde_json::to_string_pretty(value).expect("summary serializes") + "\n"
}
