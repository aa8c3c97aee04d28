//! Collaborative inference: sampled collaborator configs, per-task fan-out
//! and self-justification into one pseudo-response.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest, EmbeddingRequest, Embedder, ModelRef};
use crate::data::{Answer, Dataset, TaskRecord};
use crate::error::{Error, Result};
use crate::evaluation::extract_answer;
use crate::exec::par_map;
use crate::hashing::{derive_seed, rng_from_seed};
use crate::prompting::{answer_line, render_self_justify, render_task, TemplateSet};
use crate::retrieval::{EmbeddingIndex, DEFAULT_K};
use crate::selection::EntropyScore;

pub const DEFAULT_N: usize = 4;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
const MAX_REFS: usize = 3;
const EMBED_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Collaborator position, 1-based.
    pub index: usize,
    pub use_warm: bool,
    pub ref_count: usize,
    pub temperature: f64,
}

/// Which part of the method is switched off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Every collaborator runs without references.
    NoIcl,
    /// One sampled collaborator, no justification.
    SingleCollaborator,
    /// Keep every scored pseudo-response.
    NoSelection,
}

fn grid(max_refs: usize) -> Vec<(bool, usize)> {
    [false, true]
        .into_iter()
        .flat_map(|w| (0..=max_refs).map(move |r| (w, r)))
        .collect()
}

fn covered(cells: &[(bool, usize)]) -> bool {
    cells.iter().any(|c| c.0) && cells.iter().any(|c| c.1 > 0)
}

/// `n` configs from the warm × ref-count grid, without replacement while the
/// grid lasts. At least one config uses the warm model and at least one
/// uses references.
pub fn sample_configs(n: usize, seed: u64) -> Result<Vec<InferenceConfig>> {
    sample_configs_in(n, DEFAULT_K, DEFAULT_TEMPERATURE, seed)
}

pub fn sample_configs_in(
    n: usize,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<InferenceConfig>> {
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 collaborators, got {n}")));
    }
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let cells = grid(k.min(MAX_REFS));
    let mut rng = rng_from_seed(seed);
    let chosen = loop {
        let mut shuffled = cells.clone();
        shuffled.shuffle(&mut rng);
        let mut chosen: Vec<(bool, usize)> = shuffled.into_iter().take(n).collect();
        while chosen.len() < n {
            chosen.push(cells[rng.random_range(0..cells.len())]);
        }
        if covered(&chosen) {
            break chosen;
        }
    };
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(i, (use_warm, ref_count))| InferenceConfig {
            index: i + 1,
            use_warm,
            ref_count,
            temperature,
        })
        .collect())
}

/// One grid cell, for the single-collaborator ablation.
pub fn sample_single(k: usize, temperature: f64, seed: u64) -> InferenceConfig {
    let cells = grid(k.min(MAX_REFS));
    let (use_warm, ref_count) = cells[rng_from_seed(seed).random_range(0..cells.len())];
    InferenceConfig {
        index: 1,
        use_warm,
        ref_count,
        temperature,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabSettings {
    pub n: usize,
    pub k: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub ablation: Ablation,
    /// Stage seed; per-task config draws and sampling seeds derive from it.
    pub seed: u64,
}

impl Default for CollabSettings {
    fn default() -> Self {
        CollabSettings {
            n: DEFAULT_N,
            k: crate::retrieval::DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 512,
            concurrency: 8,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

impl CollabSettings {
    pub fn configs_for(&self, task_id: &str) -> Result<Vec<InferenceConfig>> {
        let seed = derive_seed(self.seed, &["configs", task_id]);
        let mut configs = match self.ablation {
            Ablation::SingleCollaborator => vec![sample_single(self.k, self.temperature, seed)],
            _ => sample_configs_in(self.n, self.k, self.temperature, seed)?,
        };
        if self.ablation == Ablation::NoIcl {
            for c in &mut configs {
                c.ref_count = 0;
            }
        }
        Ok(configs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaboratorOutput {
    pub config: InferenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    /// Transport or provider failure after retries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoStatus {
    Pending,
    Unanimous,
    Justified,
    ModalFallback,
    Single,
    Undecidable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoResponse {
    pub task_id: String,
    pub per_collaborator: Vec<CollaboratorOutput>,
    pub status: PseudoStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justified_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justified_answer: Option<Answer>,
    /// Justifier's generation-time logprobs, the scoring fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justifier_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<EntropyScore>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl PseudoResponse {
    pub fn is_decided(&self) -> bool {
        self.justified_answer.is_some() && self.justified_text.is_some()
    }

    pub fn entropy(&self) -> Option<f64> {
        self.score.as_ref().map(|s| s.entropy)
    }
}

pub fn write_pseudo_jsonl(path: &std::path::Path, pseudos: &[PseudoResponse]) -> Result<()> {
    let mut out = String::new();
    for p in pseudos {
        out.push_str(&serde_json::to_string(p).expect("pseudo-responses serialize"));
        out.push('\n');
    }
    crate::data::write_atomic(path, out.as_bytes())
}

pub fn load_pseudo_jsonl(path: &std::path::Path) -> Result<Vec<PseudoResponse>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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

/// Models and services a collaborator round talks to.
pub struct CollabContext<'a> {
    pub chat: &'a dyn ChatBackend,
    pub templates: &'a TemplateSet,
    pub base: &'a ModelRef,
    pub warm: &'a ModelRef,
}

/// Run every config against one task. `refs` is the task's top-k reference
/// list; a config with `ref_count = r` sees its first `r` entries.
pub fn infer_all(
    ctx: &CollabContext<'_>,
    task: &TaskRecord,
    configs: &[InferenceConfig],
    refs: &[String],
    settings: &CollabSettings,
) -> Vec<CollaboratorOutput> {
    let kind = task.expected_kind();
    configs
        .iter()
        .map(|config| {
            let model = if config.use_warm { ctx.warm } else { ctx.base };
            let take = config.ref_count.min(refs.len());
            let result = render_task(ctx.templates, task, &refs[..take]).and_then(|messages| {
                ctx.chat.chat(&ChatRequest {
                    model: model.name.clone(),
                    messages,
                    temperature: config.temperature,
                    max_tokens: settings.max_tokens,
                    want_logprobs: false,
                    seed: Some(derive_seed(
                        settings.seed,
                        &["collab", &task.id, &config.index.to_string()],
                    )),
                })
            });
            match result {
                Ok(resp) => CollaboratorOutput {
                    config: config.clone(),
                    answer: extract_answer(&resp.text, kind),
                    text: Some(resp.text),
                    error: None,
                },
                Err(e) => CollaboratorOutput {
                    config: config.clone(),
                    text: None,
                    answer: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Most frequent answer; ties go to the lowest letter or smallest value.
pub fn modal_answer(answers: &[Answer]) -> Option<Answer> {
    let mut counts: Vec<(Answer, usize)> = Vec::new();
    for a in answers {
        match counts.iter_mut().find(|(b, _)| b == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a.clone(), 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| order(b, a)))
        .map(|(a, _)| a)
}

fn order(a: &Answer, b: &Answer) -> std::cmp::Ordering {
    match (a, b) {
        (Answer::Choice { choice: x }, Answer::Choice { choice: y }) => x.cmp(y),
        (Answer::Numeric { value: x }, Answer::Numeric { value: y }) => x.total_cmp(y),
        (Answer::Text { text: x }, Answer::Text { text: y }) => x.cmp(y),
        _ => a.kind().cmp(&b.kind()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Justification {
    pub text: String,
    pub answer: Answer,
    pub status: PseudoStatus,
    pub logprobs: Option<Vec<f64>>,
    pub note: Option<String>,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reduce collaborator outputs to one answer. Unanimous answers skip the
/// justifier; an unusable justifier reply falls back to the modal answer.
pub fn self_justify(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    task: &TaskRecord,
    outputs: &[CollaboratorOutput],
    justifier: &ModelRef,
    max_tokens: u32,
) -> Result<Justification> {
    let extracted: Vec<(&CollaboratorOutput, &Answer)> = outputs
        .iter()
        .filter_map(|o| o.answer.as_ref().map(|a| (o, a)))
        .collect();
    if extracted.len() < 2 {
        return Err(Error::Precondition(format!(
            "task {} has {} extracted answers; justification needs 2",
            task.id,
            extracted.len()
        )));
    }
    let first = extracted[0].1;
    if extracted.iter().all(|(_, a)| *a == first) {
        return Ok(Justification {
            text: answer_line(first),
            answer: first.clone(),
            status: PseudoStatus::Unanimous,
            logprobs: None,
            note: None,
        });
    }
    let listed: Vec<(usize, String)> = extracted
        .iter()
        .map(|(o, _)| (o.config.index, one_line(o.text.as_deref().unwrap_or_default())))
        .collect();
    let messages = render_self_justify(templates, task, &listed)?;
    let reply = chat.chat(&ChatRequest {
        model: justifier.name.clone(),
        messages,
        temperature: 0.0,
        max_tokens,
        want_logprobs: true,
        seed: None,
    });
    let fallback = |note: String| {
        let answers: Vec<Answer> = extracted.iter().map(|(_, a)| (*a).clone()).collect();
        let modal = modal_answer(&answers).expect("at least two answers");
        Justification {
            text: answer_line(&modal),
            answer: modal,
            status: PseudoStatus::ModalFallback,
            logprobs: None,
            note: Some(note),
        }
    };
    Ok(match reply {
        Ok(resp) => match extract_answer(&resp.text, task.expected_kind()) {
            Some(answer) => Justification {
                logprobs: resp.logprob_values(),
                text: resp.text,
                answer,
                status: PseudoStatus::Justified,
                note: None,
            },
            None => fallback("justifier reply had no extractable answer".into()),
        },
        Err(e) => fallback(format!("justifier call failed: {e}")),
    })
}

/// Top-k rendered references for each task in `pool`, in pool order.
pub fn retrieve_refs(
    embedder: &dyn Embedder,
    embedding_model: &str,
    index: &EmbeddingIndex,
    pool: &Dataset,
    k: usize,
) -> Result<Vec<Vec<String>>> {
    let records: Vec<&TaskRecord> = pool.iter().collect();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EMBED_BATCH) {
        let vectors = embedder.embed(&EmbeddingRequest {
            model: embedding_model.to_string(),
            texts: chunk.iter().map(|t| t.question.clone()).collect(),
        })?;
        for v in vectors {
            let refs = index
                .knn(&v, k)?
                .into_iter()
                .map(|n| {
                    index.rendered(&n.task_id).map(str::to_string).ok_or_else(|| {
                        Error::State(format!("index entry {} disappeared", n.task_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(refs);
        }
    }
    Ok(out)
}

/// Collaborator fan-out over the whole pool. Output is ascending by task id;
/// tasks where at least half the collaborators failed are undecidable.
pub fn infer_pool(
    ctx: &CollabContext<'_>,
    pool: &Dataset,
    refs: &[Vec<String>],
    settings: &CollabSettings,
) -> Result<Vec<PseudoResponse>> {
    if refs.len() != pool.len() {
        return Err(Error::State("reference lists do not match the pool".into()));
    }
    let jobs: Vec<(&TaskRecord, &Vec<String>)> = pool.iter().zip(refs).collect();
    let results = par_map(&jobs, settings.concurrency, |(task, refs)| {
        let configs = settings.configs_for(&task.id)?;
        let outputs = infer_all(ctx, task, &configs, refs, settings);
        let failed = outputs.iter().filter(|o| o.error.is_some()).count();
        let quorum = outputs.len().div_ceil(2);
        let status = if failed >= quorum {
            PseudoStatus::Undecidable
        } else {
            PseudoStatus::Pending
        };
        let mut meta = BTreeMap::new();
        if status == PseudoStatus::Undecidable {
            meta.insert("undecidable".into(), format!("{failed} of {} collaborators failed", outputs.len()));
        }
        Ok(PseudoResponse {
            task_id: task.id.clone(),
            per_collaborator: outputs,
            status,
            justified_text: None,
            justified_answer: None,
            justifier_logprobs: None,
            score: None,
            meta,
        })
    })?;
    let mut pseudos = results.into_iter().collect::<Result<Vec<_>>>()?;
    pseudos.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(pseudos)
}

/// Fill in the justified answer for every pending pseudo-response.
pub fn justify_pool(
    ctx: &CollabContext<'_>,
    pool: &Dataset,
    pseudos: Vec<PseudoResponse>,
    settings: &CollabSettings,
) -> Result<Vec<PseudoResponse>> {
    let results = par_map(&pseudos, settings.concurrency, |p| {
        let mut p = p.clone();
        if p.status != PseudoStatus::Pending {
            return Ok(p);
        }
        let task = pool
            .get(&p.task_id)
            .ok_or_else(|| Error::State(format!("pseudo-response for unknown task {}", p.task_id)))?;
        if settings.ablation == Ablation::SingleCollaborator {
            match p.per_collaborator.first().and_then(|o| o.answer.clone()) {
                Some(a) => {
                    p.justified_text = Some(answer_line(&a));
                    p.justified_answer = Some(a);
                    p.status = PseudoStatus::Single;
                }
                None => {
                    p.status = PseudoStatus::Undecidable;
                    p.meta.insert("undecidable".into(), "no extractable answer".into());
                }
            }
            return Ok(p);
        }
        match self_justify(ctx.chat, ctx.templates, task, &p.per_collaborator, ctx.warm, settings.max_tokens) {
            Ok(j) => {
                p.justified_text = Some(j.text);
                p.justified_answer = Some(j.answer);
                p.justifier_logprobs = j.logprobs;
                p.status = j.status;
                if let Some(note) = j.note {
                    p.meta.insert("fallback".into(), note);
                }
            }
            Err(Error::Precondition(msg)) => {
                p.status = PseudoStatus::Undecidable;
                p.meta.insert("undecidable".into(), msg);
            }
            Err(e) => return Err(e),
        }
        Ok(p)
    })?;
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatResponse, TokenLogprob};
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn eight_configs_cover_the_grid() {
        for seed in 0..20 {
            let configs = sample_configs(8, seed).unwrap();
            let cells: BTreeSet<(bool, usize)> =
                configs.iter().map(|c| (c.use_warm, c.ref_count)).collect();
            assert_eq!(cells.len(), 8);
            assert_eq!(configs.iter().map(|c| c.index).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_covering() {
        assert_eq!(sample_configs(4, 11).unwrap(), sample_configs(4, 11).unwrap());
        for seed in 0..200 {
            let c = sample_configs(2, seed).unwrap();
            assert!(c.iter().any(|c| c.use_warm) && c.iter().any(|c| c.ref_count > 0));
            assert!(c.iter().all(|c| c.temperature == 1.0));
        }
        assert!(sample_configs(1, 0).is_err());
        assert_eq!(sample_configs(12, 3).unwrap().len(), 12);
    }

    #[test]
    fn no_icl_ablation_zeroes_references() {
        let s = CollabSettings {
            n: 4,
            k: 3,
            temperature: 1.0,
            max_tokens: 64,
            concurrency: 1,
            ablation: Ablation::NoIcl,
            seed: 5,
        };
        assert!(s.configs_for("t1").unwrap().iter().all(|c| c.ref_count == 0));
    }

    #[test]
    fn modal_tie_breaks_low() {
        let c = |l| Answer::choice(l);
        assert_eq!(modal_answer(&[c('A'), c('B'), c('A'), c('B')]), Some(c('A')));
        assert_eq!(modal_answer(&[c('C'), c('B'), c('C')]), Some(c('C')));
        let n = Answer::numeric;
        assert_eq!(modal_answer(&[n(2.0), n(1.0)]), Some(n(1.0)));
    }

    struct Scripted {
        reply: String,
        calls: AtomicUsize,
    }

    impl ChatBackend for Scripted {
        fn chat(&self, _req: &ChatRequest) -> Result<ChatResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: self.reply.clone(),
                token_logprobs: Some(vec![TokenLogprob { token: "x".into(), logprob: -0.1 }]),
                finish_reason: "stop".into(),
            })
        }
        fn score_completion(&self, _: &str, _: &str, _: &str) -> Result<Vec<TokenLogprob>> {
            Err(Error::Capability("none".into()))
        }
        fn supports_echo_scoring(&self) -> bool {
            false
        }
    }

    fn outputs(letters: &[char]) -> Vec<CollaboratorOutput> {
        letters
            .iter()
            .enumerate()
            .map(|(i, l)| CollaboratorOutput {
                config: InferenceConfig { index: i + 1, use_warm: true, ref_count: 0, temperature: 1.0 },
                text: Some(format!("Thinking.\nAnswer: {l}")),
                answer: Some(Answer::choice(*l)),
                error: None,
            })
            .collect()
    }

    fn task() -> TaskRecord {
        TaskRecord::new("t", "q?").with_options(["a", "b", "c", "d"])
    }

    #[test]
    fn unanimous_skips_the_justifier() {
        let chat = Scripted { reply: "Answer: C".into(), calls: AtomicUsize::new(0) };
        let warm = ModelRef::base("w", "test");
        let j = self_justify(&chat, &TemplateSet::embedded(), &task(), &outputs(&['B'; 4]), &warm, 64).unwrap();
        assert_eq!(j.answer, Answer::choice('B'));
        assert_eq!(j.status, PseudoStatus::Unanimous);
        assert_eq!(chat.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn unparseable_justifier_falls_back_to_mode() {
        let chat = Scripted { reply: "I am unsure.".into(), calls: AtomicUsize::new(0) };
        let warm = ModelRef::base("w", "test");
        let j = self_justify(&chat, &TemplateSet::embedded(), &task(), &outputs(&['A', 'B', 'A', 'B']), &warm, 64)
            .unwrap();
        assert_eq!(j.answer, Answer::choice('A'));
        assert_eq!(j.status, PseudoStatus::ModalFallback);
        assert!(j.note.is_some());
    }

    #[test]
    fn justifier_answer_is_taken() {
        let chat = Scripted { reply: "Answer: C".into(), calls: AtomicUsize::new(0) };
        let warm = ModelRef::base("w", "test");
        let j = self_justify(&chat, &TemplateSet::embedded(), &task(), &outputs(&['A', 'C', 'C', 'B']), &warm, 64)
            .unwrap();
        assert_eq!(j.answer, Answer::choice('C'));
        assert_eq!(j.logprobs, Some(vec![-0.1]));
        assert_eq!(chat.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn one_answer_is_a_precondition_error() {
        let chat = Scripted { reply: "Answer: C".into(), calls: AtomicUsize::new(0) };
        let warm = ModelRef::base("w", "test");
        let mut outs = outputs(&['A', 'B']);
        outs[1].answer = None;
        assert!(matches!(
            self_justify(&chat, &TemplateSet::embedded(), &task(), &outs, &warm, 64),
            Err(Error::Precondition(_))
        ));
    }
}
