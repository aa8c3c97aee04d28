//! Answer extraction, judging, test-set evaluation and diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest, EmbeddingRequest, Embedder, ModelRef};
use crate::collab::PseudoResponse;
use crate::data::{write_atomic, Answer, AnswerKind, Dataset, TaskRecord};
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::prompting::{render_task, TemplateSet, PARAPHRASES};
use crate::retrieval::EmbeddingIndex;
use crate::selection::{entropy, Histogram};

pub const DEFAULT_NUMERIC_TOL: f64 = 1e-2;

static CHOICE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i:answer)\s*:\s*\**\s*\(?([A-J])\b").unwrap());
static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:answer)\s*:\s*\**\s*\$?\s*([-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:[eE][-+]?\d+)?|[-+]?\.\d+)\s*(%)?")
        .unwrap()
});
static TEXT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i:answer)\s*:[ \t]*([^\n]+)").unwrap());

/// Pull the final stated answer out of a response. The last match wins;
/// `None` marks an extraction failure.
pub fn extract_answer(text: &str, kind: AnswerKind) -> Option<Answer> {
    match kind {
        AnswerKind::Choice => {
            let caps = CHOICE.captures_iter(text).last()?;
            caps[1].chars().next().map(Answer::choice)
        }
        AnswerKind::Numeric => {
            let caps = NUMERIC.captures_iter(text).last()?;
            let mut value: f64 = caps[1].replace(',', "").parse().ok()?;
            if caps.get(2).is_some() {
                value /= 100.0;
            }
            value.is_finite().then_some(Answer::numeric(value))
        }
        AnswerKind::Text => {
            let caps = TEXT.captures_iter(text).last()?;
            let t = caps[1].trim();
            (!t.is_empty()).then(|| Answer::Text {
                text: t.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    /// Prediction and gold are of different kinds; counted incorrect.
    KindMismatch,
}

impl Verdict {
    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }
}

/// Letter equality for choices; absolute tolerance for numbers.
pub fn judge(pred: &Answer, gold: &Answer, numeric_tol: f64) -> Verdict {
    let ok = match (pred, gold) {
        (Answer::Choice { choice: p }, Answer::Choice { choice: g }) => p == g,
        (Answer::Numeric { value: p }, Answer::Numeric { value: g }) => {
            (p - g).abs() <= numeric_tol + 1e-12
        }
        (Answer::Text { text: p }, Answer::Text { text: g }) => {
            p.trim().eq_ignore_ascii_case(g.trim())
        }
        _ => return Verdict::KindMismatch,
    };
    if ok {
        Verdict::Correct
    } else {
        Verdict::Incorrect
    }
}

/// Gold answers withheld from the unlabeled working copy. Readable only
/// from this module; training stages never see them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SealedGold {
    entries: BTreeMap<String, Answer>,
}

#[derive(Serialize, Deserialize)]
struct SealedEntry {
    id: String,
    answer: Answer,
}

impl SealedGold {
    pub(crate) fn insert(&mut self, id: String, answer: Answer) {
        self.entries.insert(id, answer);
    }

    fn gold(&self, id: &str) -> Option<&Answer> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, answer) in &self.entries {
            let entry = SealedEntry {
                id: id.clone(),
                answer: answer.clone(),
            };
            out.push_str(&serde_json::to_string(&entry).expect("sealed entries serialize"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: SealedEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            entries.insert(entry.id, entry.answer);
        }
        Ok(SealedGold { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_category: BTreeMap<String, CategoryStat>,
    pub extraction_failures: Vec<String>,
    pub backend_failures: Vec<String>,
    pub kind_mismatches: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_histogram: Option<Histogram>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_variants: Vec<VariantResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_std: Option<f64>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// Accuracy from a list of predictions. Categories partition the records.
    pub fn from_predictions(model: &str, predictions: Vec<Prediction>, kinds: Vec<String>) -> Self {
        let n = predictions.len();
        let correct = predictions.iter().filter(|p| p.correct).count();
        let mut per_category: BTreeMap<String, CategoryStat> = BTreeMap::new();
        for p in &predictions {
            let stat = per_category.entry(p.category.clone()).or_insert(CategoryStat {
                n: 0,
                correct: 0,
                accuracy: 0.0,
            });
            stat.n += 1;
            stat.correct += usize::from(p.correct);
        }
        for stat in per_category.values_mut() {
            stat.accuracy = stat.correct as f64 / stat.n as f64;
        }
        let entropies: Vec<f64> = predictions.iter().filter_map(|p| p.entropy).collect();
        let mean_entropy =
            (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64);
        EvalReport {
            model: model.to_string(),
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_category,
            extraction_failures: predictions
                .iter()
                .filter(|p| p.answer.is_none() && p.error.is_none())
                .map(|p| p.id.clone())
                .collect(),
            backend_failures: predictions
                .iter()
                .filter(|p| p.error.is_some())
                .map(|p| p.id.clone())
                .collect(),
            kind_mismatches: kinds,
            mean_entropy,
            entropy_histogram: (!entropies.is_empty()).then(|| Histogram::uniform(&entropies, 20)),
            prompt_variants: Vec::new(),
            variant_mean: None,
            variant_std: None,
            predictions,
        }
    }

    pub fn category_csv(&self) -> String {
        let mut out = String::from("category,n,correct,accuracy\n");
        for (cat, s) in &self.per_category {
            let _ = writeln!(out, "{cat},{},{},{}", s.n, s.correct, s.accuracy);
        }
        out
    }

    pub fn entropy_csv(&self) -> Option<String> {
        self.entropy_histogram.as_ref().map(Histogram::to_csv)
    }
}

/// In-context references for evaluation prompts.
pub struct IclSource<'a> {
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a dyn Embedder,
    pub embedding_model: &'a str,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub numeric_tol: f64,
    pub max_tokens: u32,
    /// Number of prompt variants: 1 runs the stock template only; `v > 1`
    /// adds the first `v - 1` paraphrases.
    pub variants: usize,
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            numeric_tol: DEFAULT_NUMERIC_TOL,
            max_tokens: 512,
            variants: 1,
            concurrency: 8,
        }
    }
}

fn predict(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    model: &ModelRef,
    task: &TaskRecord,
    refs: &[String],
    opts: &EvalOptions,
) -> (Prediction, bool) {
    let gold = task.answer.as_ref().expect("checked by caller");
    let category = task.category().unwrap_or("uncategorized").to_string();
    let failed = |error: String| Prediction {
        id: task.id.clone(),
        category: category.clone(),
        answer: None,
        correct: false,
        entropy: None,
        error: Some(error),
    };
    let messages = match render_task(templates, task, refs) {
        Ok(m) => m,
        Err(e) => return (failed(e.to_string()), false),
    };
    let req = ChatRequest {
        model: model.name.clone(),
        messages,
        temperature: 0.0,
        max_tokens: opts.max_tokens,
        want_logprobs: true,
        seed: None,
    };
    let resp = match chat.chat(&req) {
        Ok(r) => r,
        Err(e) => return (failed(e.to_string()), false),
    };
    let answer = extract_answer(&resp.text, gold.kind());
    let verdict = answer.as_ref().map(|a| judge(a, gold, opts.numeric_tol));
    let entropy = resp
        .logprob_values()
        .filter(|v| !v.is_empty())
        .and_then(|v| entropy(&v).ok());
    (
        Prediction {
            id: task.id.clone(),
            category,
            answer,
            correct: verdict.is_some_and(Verdict::is_correct),
            entropy,
            error: None,
        },
        verdict == Some(Verdict::KindMismatch),
    )
}

fn references(test: &Dataset, icl: Option<&IclSource<'_>>) -> Result<Vec<Vec<String>>> {
    let Some(icl) = icl else {
        return Ok(vec![Vec::new(); test.len()]);
    };
    let vectors = icl.embedder.embed(&EmbeddingRequest {
        model: icl.embedding_model.to_string(),
        texts: test.iter().map(|t| t.question.clone()).collect(),
    })?;
    vectors
        .iter()
        .map(|v| {
            Ok(icl
                .index
                .knn(v, icl.k)?
                .into_iter()
                .filter_map(|n| icl.index.rendered(&n.task_id).map(str::to_string))
                .collect())
        })
        .collect()
}

fn run_pass(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    model: &ModelRef,
    test: &Dataset,
    refs: &[Vec<String>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let indexed: Vec<(usize, &TaskRecord)> = test.iter().enumerate().collect();
    let results = par_map(&indexed, opts.concurrency, |(i, task)| {
        predict(chat, templates, model, task, &refs[*i], opts)
    })?;
    let kinds = results
        .iter()
        .filter(|(_, mismatch)| *mismatch)
        .map(|(p, _)| p.id.clone())
        .collect();
    let predictions = results.into_iter().map(|(p, _)| p).collect();
    Ok(EvalReport::from_predictions(&model.name, predictions, kinds))
}

/// Greedy evaluation of `model` on the test set. Extraction and backend
/// failures count as incorrect.
pub fn evaluate(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    model: &ModelRef,
    test: &Dataset,
    icl: Option<&IclSource<'_>>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Precondition("test set is empty".into()));
    }
    if let Some(t) = test.iter().find(|t| t.answer.is_none()) {
        return Err(Error::Precondition(format!("test task {} has no gold answer", t.id)));
    }
    if opts.variants == 0 || opts.variants > PARAPHRASES.len() + 1 {
        return Err(Error::Validation(format!(
            "variants must be in 1..={}",
            PARAPHRASES.len() + 1
        )));
    }
    let refs = references(test, icl)?;
    let mut report = run_pass(chat, templates, model, test, &refs, opts)?;
    if opts.variants > 1 {
        let mut variants = vec![VariantResult {
            name: "original".into(),
            accuracy: report.accuracy,
        }];
        for i in 0..opts.variants - 1 {
            let set = templates.paraphrased(i)?;
            let pass = run_pass(chat, &set, model, test, &refs, opts)?;
            variants.push(VariantResult {
                name: PARAPHRASES[i].0.to_string(),
                accuracy: pass.accuracy,
            });
        }
        let m = variants.len() as f64;
        let mean = variants.iter().map(|v| v.accuracy).sum::<f64>() / m;
        let var = variants
            .iter()
            .map(|v| (v.accuracy - mean).powi(2))
            .sum::<f64>()
            / m;
        report.variant_mean = Some(mean);
        report.variant_std = Some(var.sqrt());
        report.prompt_variants = variants;
    }
    Ok(report)
}

/// Accuracy of pseudo-labels against the sealed gold side-table. Output is
/// for reporting only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDiagnostic {
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub kept: usize,
    pub kept_correct: usize,
    pub kept_accuracy: Option<f64>,
    pub dropped: usize,
    pub dropped_correct: usize,
    pub dropped_accuracy: Option<f64>,
}

pub fn pseudo_label_diagnostic(
    pseudos: &[PseudoResponse],
    kept_ids: &BTreeSet<String>,
    sealed: &SealedGold,
    numeric_tol: f64,
) -> PseudoDiagnostic {
    let ratio = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
    let (mut n, mut c, mut kn, mut kc, mut dn, mut dc) = (0, 0, 0, 0, 0, 0);
    for p in pseudos {
        let (Some(pred), Some(gold)) = (p.justified_answer.as_ref(), sealed.gold(&p.task_id))
        else {
            continue;
        };
        let ok = judge(pred, gold, numeric_tol).is_correct();
        n += 1;
        c += usize::from(ok);
        if kept_ids.contains(&p.task_id) {
            kn += 1;
            kc += usize::from(ok);
        } else if p.score.is_some() {
            dn += 1;
            dc += usize::from(ok);
        }
    }
    PseudoDiagnostic {
        labeled: n,
        correct: c,
        accuracy: ratio(c, n),
        kept: kn,
        kept_correct: kc,
        kept_accuracy: ratio(kc, kn),
        dropped: dn,
        dropped_correct: dc,
        dropped_accuracy: ratio(dc, dn),
    }
}
