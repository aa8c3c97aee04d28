//! Resumable round orchestration over a working directory.
//!
//! A round moves through `init → warmed → indexed → inferred → justified →
//! scored → selected → evolved → evaluated`. Every stage writes its
//! artifacts before `state.json` records the new stage, so a killed run
//! resumes at the last recorded stage and reproduces the same outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::{SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::payload::{parse_training_jsonl, to_jsonl};
use crate::backend::{wait_for_job, ChatMessage, FineTuneJob, Journal, JournalEntry, JobStatus, ModelRef, ModelRole, Services, TrainingExample};
use crate::collab::{infer_pool, justify_pool, load_pseudo_jsonl, retrieve_refs, write_pseudo_jsonl, Ablation, CollabContext, CollabSettings, PseudoResponse};
use crate::config::RunConfig;
use crate::data::{load_jsonl, merge, split, write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, pseudo_label_diagnostic, EvalOptions, EvalReport, IclSource, PseudoDiagnostic, SealedGold};
use crate::hashing::derive_seed;
use crate::prompting::{answer_line, render_user_prompt, TemplateSet};
use crate::retrieval::{build_index, EmbeddingIndex};
use crate::selection::{percentile_threshold, score_labeled, score_pool, select, Histogram, SelectionReport, TauSource, HISTOGRAM_BINS};

pub const STATE_FILE: &str = "state.json";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const UNLABELED_FILE: &str = "unlabeled.jsonl";
pub const SEALED_FILE: &str = "unlabeled.sealed.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const INDEX_FILE: &str = "labeled.index.jsonl";
pub const PSEUDO_FILE: &str = "pseudo.jsonl";
pub const SELECTED_FILE: &str = "selected.jsonl";
pub const SELECTION_REPORT_FILE: &str = "selection_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const PAYLOAD_DIR: &str = "payloads";
const LOCK_FILE: &str = ".lock";

/// System turn of every fine-tune example.
pub const TRAINING_SYSTEM_PROMPT: &str = "You are an expert in the question answering.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Warmed,
    Indexed,
    Inferred,
    Justified,
    Scored,
    Selected,
    Evolved,
    Evaluated,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Init,
        Stage::Warmed,
        Stage::Indexed,
        Stage::Inferred,
        Stage::Justified,
        Stage::Scored,
        Stage::Selected,
        Stage::Evolved,
        Stage::Evaluated,
    ];

    pub fn next(self) -> Option<Stage> {
        Stage::ALL.iter().position(|s| *s == self).and_then(|i| Stage::ALL.get(i + 1).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Warmed => "warmed",
            Stage::Indexed => "indexed",
            Stage::Inferred => "inferred",
            Stage::Justified => "justified",
            Stage::Scored => "scored",
            Stage::Selected => "selected",
            Stage::Evolved => "evolved",
            Stage::Evaluated => "evaluated",
        }
    }

    /// What running the step that reaches this stage does.
    pub fn action(self) -> &'static str {
        match self {
            Stage::Init => "prepare round inputs",
            Stage::Warmed => "fine-tune base on labeled data into the warm model",
            Stage::Indexed => "embed labeled questions and build the retrieval index",
            Stage::Inferred => "run collaborators on every unlabeled task",
            Stage::Justified => "self-justify collaborator answers with the warm model",
            Stage::Scored => "score justified responses under the warm model",
            Stage::Selected => "threshold entropies and select pseudo-labels",
            Stage::Evolved => "fine-tune base on labeled plus selected data",
            Stage::Evaluated => "evaluate models on the test set",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub base: ModelRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolved: Option<ModelRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub labeled: String,
    pub unlabeled: String,
    pub selected: String,
    pub test: String,
}

impl Default for DatasetPaths {
    fn default() -> Self {
        DatasetPaths {
            labeled: LABELED_FILE.into(),
            unlabeled: UNLABELED_FILE.into(),
            selected: SELECTED_FILE.into(),
            test: TEST_FILE.into(),
        }
    }
}

/// Method settings frozen when a round starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub n: usize,
    pub k: usize,
    pub theta: f64,
    pub epochs: u32,
    pub temperature: f64,
    pub tau_source: TauSource,
    pub ablation: Ablation,
    pub seed: u64,
    pub round_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub labeled: usize,
    /// Pool size when the round started.
    pub unlabeled: usize,
    pub selected: usize,
    /// Pool size once this round's selection is removed.
    pub remaining: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub warm: String,
    pub evolved: String,
    /// Test accuracy by model role.
    pub accuracy: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mean_entropy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub round: usize,
    pub stage: Stage,
    pub models: Models,
    pub datasets: DatasetPaths,
    pub config: ConfigSnapshot,
    /// Every fine-tune job started, in order.
    pub jobs: Vec<FineTuneJob>,
    pub history: Vec<RoundSummary>,
    /// Consecutive rounds whose selection came out empty.
    pub empty_selections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped: Option<String>,
    /// Unix seconds at which each stage of the current round was reached.
    pub timestamps: BTreeMap<String, u64>,
}

/// Everything the evaluation step writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub round: usize,
    pub reports: BTreeMap<String, EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<PseudoDiagnostic>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Exclusive claim on a working directory, released on drop. A lock left by
/// a dead process is taken over.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(WorkdirLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    let pid: Option<u32> = holder.trim().parse().ok();
                    if pid.is_some_and(alive) {
                        return Err(Error::State(format!(
                            "{} is in use by process {}",
                            workdir.display(),
                            holder.trim()
                        )));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::State(format!("could not lock {}", workdir.display())))
    }
}

fn alive(pid: u32) -> bool {
    let proc = Path::new("/proc");
    if !proc.exists() {
        return true;
    }
    proc.join(pid.to_string()).exists()
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Chat-format fine-tune examples for records that carry gold answers.
pub fn training_examples(templates: &TemplateSet, data: &Dataset) -> Result<Vec<TrainingExample>> {
    data.iter()
        .map(|t| {
            let gold = t
                .answer
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("training record {} has no answer", t.id)))?;
            Ok(TrainingExample {
                messages: vec![
                    ChatMessage::system(TRAINING_SYSTEM_PROMPT),
                    ChatMessage::user(render_user_prompt(templates, t)?),
                    ChatMessage::assistant(answer_line(gold)),
                ],
            })
        })
        .collect()
}

static PAYLOAD_QUESTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)Question:\n(.*?)\n\n(?:Options:|Provide your answer)").unwrap());

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub payload_files: Vec<String>,
    pub examples: usize,
    /// Test ids named in id sidecars or matched by question text.
    pub test_hits: Vec<String>,
    /// Training files named by the journal that were not found on disk.
    pub missing_files: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.test_hits.is_empty() && self.missing_files.is_empty()
    }
}

fn audit_file(path: &Path, test: &Dataset, report: &mut AuditReport) -> Result<()> {
    let by_question: BTreeMap<&str, &str> = test.iter().map(|t| (t.question.as_str(), t.id.as_str())).collect();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let examples = parse_training_jsonl(&text, path)?;
    report.examples += examples.len();
    for ex in &examples {
        for m in &ex.messages {
            for caps in PAYLOAD_QUESTION.captures_iter(&m.content) {
                if let Some(id) = by_question.get(&caps[1]) {
                    report.test_hits.push((*id).to_string());
                }
            }
        }
    }
    let sidecar = path.with_extension("ids.json");
    if sidecar.exists() {
        let ids: Vec<String> = read_json(&sidecar)?;
        let test_ids = test.ids();
        report.test_hits.extend(ids.into_iter().filter(|id| test_ids.contains(id)));
    }
    report.payload_files.push(path.display().to_string());
    Ok(())
}

/// Check every payload under the working directory, and every training file
/// the journal says was submitted, for test-set leakage.
pub fn audit_workdir(workdir: &Path) -> Result<AuditReport> {
    let test = load_jsonl(&workdir.join(TEST_FILE))?;
    let mut report = AuditReport::default();
    let mut seen = BTreeSet::new();
    let mut files: Vec<PathBuf> = Vec::new();
    let payloads = workdir.join(PAYLOAD_DIR);
    if payloads.exists() {
        for entry in fs::read_dir(&payloads).map_err(|e| Error::io(&payloads, e))? {
            let p = entry.map_err(|e| Error::io(&payloads, e))?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
    }
    files.sort();
    let journal = workdir.join(JOURNAL_FILE);
    if journal.exists() {
        for entry in Journal::read(&journal)? {
            if entry.op == "finetune_start" {
                if let Some(p) = entry.request["training_file"].as_str() {
                    let p = PathBuf::from(p);
                    if p.exists() {
                        files.push(p);
                    } else {
                        report.missing_files.push(p.display().to_string());
                    }
                }
            }
        }
    }
    for f in files {
        let key = fs::canonicalize(&f).unwrap_or(f.clone());
        if seen.insert(key) {
            audit_file(&f, &test, &mut report)?;
        }
    }
    report.test_hits.sort();
    report.test_hits.dedup();
    Ok(report)
}

/// Driver for one working directory. Holds the directory lock for its
/// lifetime; every backend call is journaled.
pub struct Pipeline {
    workdir: PathBuf,
    cfg: RunConfig,
    services: Services,
    templates: TemplateSet,
    base: ModelRef,
    _lock: WorkdirLock,
}

impl Pipeline {
    pub fn open(cfg: RunConfig, services: Services, base: ModelRef) -> Result<Self> {
        cfg.validate()?;
        let workdir = cfg.workdir.clone();
        let lock = WorkdirLock::acquire(&workdir)?;
        let templates = cfg.templates()?;
        let journal = Arc::new(Journal::open(&workdir.join(JOURNAL_FILE))?);
        write_atomic(&workdir.join(CONFIG_SNAPSHOT_FILE), cfg.to_toml().as_bytes())?;
        Ok(Pipeline {
            services: services.journaled(journal),
            workdir,
            cfg,
            templates,
            base,
            _lock: lock,
        })
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn has_state(&self) -> bool {
        self.path(STATE_FILE).exists()
    }

    pub fn load_state(&self) -> Result<PipelineState> {
        let path = self.path(STATE_FILE);
        if !path.exists() {
            return Err(Error::State(format!(
                "no {} in {}; run split first",
                STATE_FILE,
                self.workdir.display()
            )));
        }
        let state: PipelineState = read_json(&path)?;
        self.check_snapshot(&state)?;
        Ok(state)
    }

    fn save(&self, state: &PipelineState) -> Result<()> {
        write_json(&self.path(STATE_FILE), state)
    }

    fn snapshot(&self, round: usize) -> ConfigSnapshot {
        let m = &self.cfg.method;
        ConfigSnapshot {
            n: m.n,
            k: m.k,
            theta: self.cfg.effective_theta(),
            epochs: m.epochs,
            temperature: m.temperature,
            tau_source: m.tau_source,
            ablation: m.ablation,
            seed: self.cfg.seed,
            round_seed: derive_seed(self.cfg.seed, &["round", &round.to_string()]),
        }
    }

    /// The settings of a round in progress cannot change under it.
    fn check_snapshot(&self, state: &PipelineState) -> Result<()> {
        if state.stage == Stage::Init || state.stage == Stage::Evaluated {
            return Ok(());
        }
        let want = self.snapshot(state.round);
        if want != state.config {
            return Err(Error::State(format!(
                "round {} was started with different settings ({:?}); finish it with the original configuration or use a fresh workdir",
                state.round, state.config
            )));
        }
        Ok(())
    }

    /// Split `dataset` into the working directory and start round 1.
    pub fn init_from_dataset(&self, dataset: &Dataset) -> Result<PipelineState> {
        if self.has_state() {
            return Err(Error::State(format!("{} already holds a run", self.workdir.display())));
        }
        let parts = split(dataset, self.cfg.data.split_ratio(), self.cfg.split_seed())?;
        parts.labeled.write_jsonl(&self.path(LABELED_FILE))?;
        parts.unlabeled.write_jsonl(&self.path(UNLABELED_FILE))?;
        parts.sealed.write(&self.path(SEALED_FILE))?;
        parts.test.write_jsonl(&self.path(TEST_FILE))?;
        self.init_state()
    }

    /// Start round 1 from split files already present in the working directory.
    pub fn init_state(&self) -> Result<PipelineState> {
        let labeled = load_jsonl(&self.path(LABELED_FILE))?;
        let unlabeled = load_jsonl(&self.path(UNLABELED_FILE))?;
        let test = load_jsonl(&self.path(TEST_FILE))?;
        check_round_inputs(&labeled, &unlabeled, &test)?;
        let mut state = PipelineState {
            round: 1,
            stage: Stage::Init,
            models: Models {
                base: self.base.clone(),
                warm: None,
                evolved: None,
            },
            datasets: DatasetPaths::default(),
            config: self.snapshot(1),
            jobs: Vec::new(),
            history: Vec::new(),
            empty_selections: 0,
            stopped: None,
            timestamps: BTreeMap::new(),
        };
        state.timestamps.insert(Stage::Init.name().into(), now());
        self.save(&state)?;
        Ok(state)
    }

    fn labeled(&self) -> Result<Dataset> {
        load_jsonl(&self.path(LABELED_FILE))
    }

    fn unlabeled(&self) -> Result<Dataset> {
        load_jsonl(&self.path(UNLABELED_FILE))
    }

    fn test(&self) -> Result<Dataset> {
        load_jsonl(&self.path(TEST_FILE))
    }

    fn collab_settings(&self, state: &PipelineState) -> CollabSettings {
        CollabSettings {
            n: state.config.n,
            k: state.config.k,
            temperature: state.config.temperature,
            max_tokens: self.cfg.method.max_tokens,
            concurrency: self.cfg.method.concurrency,
            ablation: state.config.ablation,
            seed: derive_seed(state.config.round_seed, &["collab"]),
        }
    }

    fn warm(&self, state: &PipelineState) -> Result<ModelRef> {
        state
            .models
            .warm
            .clone()
            .ok_or_else(|| Error::State("no warm model recorded".into()))
    }

    /// Write the payload and its id sidecar, refusing any test id.
    fn write_payload(&self, name: &str, data: &Dataset) -> Result<PathBuf> {
        let test_ids = self.test()?.ids();
        let leaked: Vec<String> = data.ids().intersection(&test_ids).cloned().collect();
        if !leaked.is_empty() {
            return Err(Error::Precondition(format!(
                "test ids in fine-tune payload {name}: {}",
                leaked.join(", ")
            )));
        }
        let examples = training_examples(&self.templates, data)?;
        let path = self.path(PAYLOAD_DIR).join(format!("{name}.jsonl"));
        write_atomic(&path, to_jsonl(&examples).as_bytes())?;
        let ids: Vec<&str> = data.iter().map(|t| t.id.as_str()).collect();
        write_json(&path.with_extension("ids.json"), &ids)?;
        let mut audit = AuditReport::default();
        audit_file(&path, &self.test()?, &mut audit)?;
        if !audit.test_hits.is_empty() {
            return Err(Error::Precondition(format!(
                "test tasks in fine-tune payload {name}: {}",
                audit.test_hits.join(", ")
            )));
        }
        Ok(path)
    }

    fn finetune(&self, state: &mut PipelineState, payload: &Path, target: ModelRole) -> Result<ModelRef> {
        let ft = self.services.finetuner.as_ref();
        let job = ft.start_finetune(&self.base, payload, state.config.epochs, target)?;
        let job = wait_for_job(ft, job, self.cfg.poll_interval(), self.cfg.finetune_timeout())?;
        state.jobs.push(job.clone());
        match (job.status, job.result) {
            (JobStatus::Succeeded, Some(model)) => Ok(model),
            _ => {
                self.save(state)?;
                Err(Error::FineTune(format!(
                    "job {} failed: {}",
                    job.id,
                    job.error.unwrap_or_else(|| "no reason given".into())
                )))
            }
        }
    }

    /// Advance one stage. Returns the stage reached.
    pub fn step(&self, state: &mut PipelineState) -> Result<Stage> {
        let next = state
            .stage
            .next()
            .ok_or_else(|| Error::State(format!("round {} is already evaluated", state.round)))?;
        log::info!("round {}: {}", state.round, next.action());
        match next {
            Stage::Init => unreachable!("init is never a successor"),
            Stage::Warmed => {
                let labeled = self.labeled()?;
                if labeled.is_empty() {
                    return Err(Error::Precondition("labeled set is empty".into()));
                }
                let payload = self.write_payload(&format!("warmup_r{}", state.round), &labeled)?;
                let warm = self.finetune(state, &payload, ModelRole::Warm)?;
                state.models.warm = Some(warm);
            }
            Stage::Indexed => {
                let index = build_index(&self.labeled()?, self.services.embedder.as_ref(), &self.services.embedding_model)?;
                index.write_jsonl(&self.path(INDEX_FILE))?;
            }
            Stage::Inferred => {
                let pool = self.unlabeled()?;
                let index = EmbeddingIndex::load_jsonl(&self.path(INDEX_FILE))?;
                let settings = self.collab_settings(state);
                let refs = retrieve_refs(
                    self.services.embedder.as_ref(),
                    &self.services.embedding_model,
                    &index,
                    &pool,
                    settings.k,
                )?;
                let warm = self.warm(state)?;
                let ctx = CollabContext {
                    chat: self.services.chat.as_ref(),
                    templates: &self.templates,
                    base: &self.base,
                    warm: &warm,
                };
                let pseudos = infer_pool(&ctx, &pool, &refs, &settings)?;
                write_pseudo_jsonl(&self.path(PSEUDO_FILE), &pseudos)?;
            }
            Stage::Justified => {
                let pool = self.unlabeled()?;
                let settings = self.collab_settings(state);
                let warm = self.warm(state)?;
                let ctx = CollabContext {
                    chat: self.services.chat.as_ref(),
                    templates: &self.templates,
                    base: &self.base,
                    warm: &warm,
                };
                let pseudos = load_pseudo_jsonl(&self.path(PSEUDO_FILE))?;
                let pseudos = justify_pool(&ctx, &pool, pseudos, &settings)?;
                write_pseudo_jsonl(&self.path(PSEUDO_FILE), &pseudos)?;
            }
            Stage::Scored => {
                let pool = self.unlabeled()?;
                let warm = self.warm(state)?;
                let pseudos = load_pseudo_jsonl(&self.path(PSEUDO_FILE))?;
                let pseudos = score_pool(
                    self.services.chat.as_ref(),
                    &self.templates,
                    &pool,
                    pseudos,
                    &warm,
                    self.cfg.method.concurrency,
                )?;
                write_pseudo_jsonl(&self.path(PSEUDO_FILE), &pseudos)?;
            }
            Stage::Selected => {
                let (selected, report) = self.run_selection(state)?;
                selected.write_jsonl(&self.path(SELECTED_FILE))?;
                write_json(&self.path(SELECTION_REPORT_FILE), &report)?;
                if selected.is_empty() {
                    log::warn!("round {}: selection is empty; the final fine-tune uses labeled data only", state.round);
                }
            }
            Stage::Evolved => {
                let combined = merge(&self.labeled()?, &load_jsonl(&self.path(SELECTED_FILE))?)?;
                let payload = self.write_payload(&format!("evolve_r{}", state.round), &combined)?;
                let evolved = self.finetune(state, &payload, ModelRole::Evolved)?;
                state.models.evolved = Some(evolved);
            }
            Stage::Evaluated => {
                let bundle = self.run_evaluation(state, &self.cfg.method.eval_targets)?;
                write_json(&self.path(EVAL_REPORT_FILE), &bundle)?;
                for (role, report) in &bundle.reports {
                    write_atomic(&self.path(&format!("eval_{role}_categories.csv")), report.category_csv().as_bytes())?;
                    if let Some(csv) = report.entropy_csv() {
                        write_atomic(&self.path(&format!("eval_{role}_entropy.csv")), csv.as_bytes())?;
                    }
                }
                state.history.push(self.summarize(state, &bundle)?);
            }
        }
        state.stage = next;
        state.timestamps.insert(next.name().into(), now());
        self.save(state)?;
        Ok(next)
    }

    fn run_selection(&self, state: &PipelineState) -> Result<(Dataset, SelectionReport)> {
        let pool = self.unlabeled()?;
        let pseudos = load_pseudo_jsonl(&self.path(PSEUDO_FILE))?;
        let (scored, excluded): (Vec<PseudoResponse>, Vec<PseudoResponse>) =
            pseudos.into_iter().partition(|p| p.score.is_some());
        let excluded_ids: Vec<String> = excluded.into_iter().map(|p| p.task_id).collect();
        let theta = state.config.theta;
        if scored.is_empty() {
            return Ok((
                Dataset::empty("selected"),
                SelectionReport {
                    tau: None,
                    theta,
                    tau_source: state.config.tau_source,
                    kept_ids: Vec::new(),
                    dropped_ids: Vec::new(),
                    excluded_ids,
                    histogram: Histogram::uniform(&[], HISTOGRAM_BINS),
                },
            ));
        }
        let population = match state.config.tau_source {
            TauSource::Unlabeled => scored.iter().filter_map(PseudoResponse::entropy).collect(),
            TauSource::Labeled => score_labeled(
                self.services.chat.as_ref(),
                &self.templates,
                &self.labeled()?,
                &self.warm(state)?,
                self.cfg.method.concurrency,
            )?,
        };
        let tau = percentile_threshold(&population, theta)?;
        let (selected, mut report) = select(&pool, &scored, tau, theta, state.config.tau_source)?;
        report.excluded_ids = excluded_ids;
        Ok((selected, report))
    }

    /// Evaluate the given roles on the test set, plus pseudo-label accuracy
    /// against the sealed gold.
    pub fn run_evaluation(&self, state: &PipelineState, targets: &[ModelRole]) -> Result<EvalBundle> {
        let test = self.test()?;
        let opts = EvalOptions {
            numeric_tol: self.cfg.method.numeric_tol,
            max_tokens: self.cfg.method.max_tokens,
            variants: self.cfg.method.eval_variants,
            concurrency: self.cfg.method.concurrency,
        };
        let index = if self.cfg.method.eval_icl {
            Some(EmbeddingIndex::load_jsonl(&self.path(INDEX_FILE))?)
        } else {
            None
        };
        let icl = index.as_ref().map(|index| IclSource {
            index,
            embedder: self.services.embedder.as_ref(),
            embedding_model: &self.services.embedding_model,
            k: state.config.k,
        });
        let mut reports = BTreeMap::new();
        for role in targets {
            let model = match role {
                ModelRole::Base => Some(&state.models.base),
                ModelRole::Warm => state.models.warm.as_ref(),
                ModelRole::Evolved => state.models.evolved.as_ref(),
            }
            .ok_or_else(|| Error::State(format!("no {role} model to evaluate yet")))?;
            let report = evaluate(self.services.chat.as_ref(), &self.templates, model, &test, icl.as_ref(), &opts)?;
            reports.insert(role.to_string(), report);
        }
        let pseudo_labels = self.pseudo_diagnostic()?;
        Ok(EvalBundle {
            round: state.round,
            reports,
            pseudo_labels,
        })
    }

    fn pseudo_diagnostic(&self) -> Result<Option<PseudoDiagnostic>> {
        let (sealed, pseudo, report) = (self.path(SEALED_FILE), self.path(PSEUDO_FILE), self.path(SELECTION_REPORT_FILE));
        if !(sealed.exists() && pseudo.exists() && report.exists()) {
            return Ok(None);
        }
        let report: SelectionReport = read_json(&report)?;
        let kept: BTreeSet<String> = report.kept_ids.into_iter().collect();
        Ok(Some(pseudo_label_diagnostic(
            &load_pseudo_jsonl(&pseudo)?,
            &kept,
            &SealedGold::load(&sealed)?,
            self.cfg.method.numeric_tol,
        )))
    }

    fn summarize(&self, state: &PipelineState, bundle: &EvalBundle) -> Result<RoundSummary> {
        let report: SelectionReport = read_json(&self.path(SELECTION_REPORT_FILE))?;
        let pool = self.unlabeled()?.len();
        Ok(RoundSummary {
            round: state.round,
            labeled: self.labeled()?.len(),
            unlabeled: pool,
            selected: report.kept_ids.len(),
            remaining: pool - report.kept_ids.len(),
            tau: report.tau,
            warm: state.models.warm.as_ref().map(|m| m.name.clone()).unwrap_or_default(),
            evolved: state.models.evolved.as_ref().map(|m| m.name.clone()).unwrap_or_default(),
            accuracy: bundle.reports.iter().map(|(k, r)| (k.clone(), r.accuracy)).collect(),
            mean_entropy: bundle
                .reports
                .iter()
                .filter_map(|(k, r)| r.mean_entropy.map(|e| (k.clone(), e)))
                .collect(),
        })
    }

    /// Run stages until `target` is reached (no-op if already there).
    pub fn run_until(&self, state: &mut PipelineState, target: Stage) -> Result<()> {
        while state.stage < target {
            self.step(state)?;
        }
        Ok(())
    }

    pub fn run_round(&self, state: &mut PipelineState) -> Result<()> {
        self.run_until(state, Stage::Evaluated)
    }

    /// Fold the finished round's selection into the labeled set and start
    /// the next round. Returns false when the run should stop.
    pub fn advance_round(&self, state: &mut PipelineState) -> Result<bool> {
        if state.stage != Stage::Evaluated {
            return Err(Error::State(format!(
                "round {} is at stage {}; finish it first",
                state.round,
                state.stage.name()
            )));
        }
        if state.stopped.is_some() {
            return Ok(false);
        }
        let labeled = self.labeled()?;
        let unlabeled = self.unlabeled()?;
        let selected = load_jsonl(&self.path(SELECTED_FILE))?;
        let archive = self.path("rounds").join(format!("r{}", state.round));
        fs::create_dir_all(&archive).map_err(|e| Error::io(&archive, e))?;
        for name in [LABELED_FILE, UNLABELED_FILE, PSEUDO_FILE, SELECTED_FILE, SELECTION_REPORT_FILE, EVAL_REPORT_FILE] {
            let from = self.path(name);
            if from.exists() {
                fs::copy(&from, archive.join(name)).map_err(|e| Error::io(&from, e))?;
            }
        }
        let next_labeled = merge(&labeled, &selected)?;
        let next_unlabeled = unlabeled.without_ids(&selected.ids(), format!("{}-r{}", unlabeled.provenance, state.round));
        state.empty_selections = if selected.is_empty() { state.empty_selections + 1 } else { 0 };
        if next_unlabeled.is_empty() {
            state.stopped = Some(format!("unlabeled pool exhausted after round {}", state.round));
        } else if state.empty_selections >= 2 {
            state.stopped = Some(format!("selection empty in rounds {} and {}", state.round - 1, state.round));
        }
        if let Some(reason) = &state.stopped {
            log::info!("stopping: {reason}");
            self.save(state)?;
            return Ok(false);
        }
        next_labeled.write_jsonl(&self.path(LABELED_FILE))?;
        next_unlabeled.write_jsonl(&self.path(UNLABELED_FILE))?;
        for name in [PSEUDO_FILE, SELECTED_FILE, SELECTION_REPORT_FILE, INDEX_FILE] {
            let _ = fs::remove_file(self.path(name));
        }
        state.round += 1;
        state.stage = Stage::Init;
        state.models.warm = None;
        state.models.evolved = None;
        state.config = self.snapshot(state.round);
        state.timestamps = BTreeMap::from([(Stage::Init.name().to_string(), now())]);
        self.save(state)?;
        Ok(true)
    }

    /// Run until `rounds` rounds are evaluated or an early stop triggers.
    pub fn iterate(&self, state: &mut PipelineState, rounds: usize) -> Result<()> {
        if rounds == 0 {
            return Err(Error::Validation("rounds must be at least 1".into()));
        }
        loop {
            self.run_round(state)?;
            if state.round >= rounds || !self.advance_round(state)? {
                return Ok(());
            }
        }
    }

    /// The stages a run would execute from `state`, without calling anything.
    pub fn plan(state: Option<&PipelineState>, target: Stage, rounds: usize) -> Vec<String> {
        let (round, stage) = state.map(|s| (s.round, s.stage)).unwrap_or((1, Stage::Init));
        let mut out = Vec::new();
        if state.is_none() {
            out.push("split input into labeled/unlabeled/test".to_string());
        }
        let mut r = round;
        let mut s = stage;
        loop {
            while s < target {
                s = s.next().expect("below evaluated");
                out.push(format!("round {r}: {} -> {}", s.action(), s.name()));
            }
            if r >= rounds {
                return out;
            }
            r += 1;
            s = Stage::Init;
            out.push(format!("round {r}: fold selected pseudo-labels into the labeled set"));
        }
    }

    pub fn services(&self) -> &Services {
        &self.services
    }

    pub fn journal_entries(&self) -> Result<Vec<JournalEntry>> {
        Journal::read(&self.path(JOURNAL_FILE))
    }
}

fn check_round_inputs(labeled: &Dataset, unlabeled: &Dataset, test: &Dataset) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Precondition("labeled set is empty".into()));
    }
    if unlabeled.is_empty() {
        return Err(Error::Precondition("unlabeled set is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::Precondition("test set is empty".into()));
    }
    let l = labeled.ids();
    let u = unlabeled.ids();
    let t = test.ids();
    let overlap: Vec<String> = l
        .intersection(&u)
        .chain(l.intersection(&t))
        .chain(u.intersection(&t))
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(Error::DuplicateId(overlap));
    }
    if let Some(r) = labeled.iter().find(|r| r.answer.is_none()) {
        return Err(Error::Precondition(format!("labeled record {} has no answer", r.id)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_ordered() {
        assert_eq!(Stage::Init.next(), Some(Stage::Warmed));
        assert_eq!(Stage::Evaluated.next(), None);
        assert!(Stage::Scored < Stage::Selected);
    }

    #[test]
    fn plan_lists_remaining_stages() {
        let plan = Pipeline::plan(None, Stage::Evaluated, 2);
        assert_eq!(plan.len(), 1 + 8 + 1 + 8);
    }

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = WorkdirLock::acquire(dir.path()).unwrap();
        assert!(WorkdirLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(WorkdirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "4294967294\n").unwrap();
        assert!(WorkdirLock::acquire(dir.path()).is_ok());
    }
}
