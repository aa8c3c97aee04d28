//! Confidence scoring and percentile selection of pseudo-responses.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ModelRef};
use crate::collab::PseudoResponse;
use crate::data::{Dataset, TaskRecord};
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::prompting::{answer_line, render_user_prompt, TemplateSet};

pub const DEFAULT_THETA: f64 = 50.0;
pub const HISTOGRAM_BINS: usize = 20;
/// Separates the task prompt from the response being scored.
pub const SCORING_DELIMITER: &str = "\n\nResponse:\n";

/// Mean negative log-likelihood per token.
pub fn entropy(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Validation("entropy of an empty logprob list".into()));
    }
    if let Some(bad) = logprobs.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(Error::Validation(format!("logprob {bad} is not finite and ≤ 0")));
    }
    let sum: f64 = logprobs.iter().sum();
    Ok(-(sum / logprobs.len() as f64) + 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    EchoScored,
    GenerationLogprobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub task_id: String,
    pub entropy: f64,
    pub token_count: usize,
    pub source: ScoreSource,
}

/// Prompt under which a response to `task` is teacher-forced.
pub fn scoring_prompt(templates: &TemplateSet, task: &TaskRecord) -> Result<String> {
    Ok(format!("{}{SCORING_DELIMITER}", render_user_prompt(templates, task)?))
}

/// Score `text` as a response to `task` under `model`, by echo-scoring when
/// the backend supports it, else from `fallback` generation logprobs.
pub fn score_text(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    task: &TaskRecord,
    text: &str,
    model: &ModelRef,
    fallback: Option<&[f64]>,
) -> Result<EntropyScore> {
    if text.is_empty() {
        return Err(Error::Precondition(format!("task {} has empty text to score", task.id)));
    }
    let (values, source) = if chat.supports_echo_scoring() {
        let prompt = scoring_prompt(templates, task)?;
        let lps = chat.score_completion(&model.name, &prompt, text)?;
        (lps.into_iter().map(|t| t.logprob).collect::<Vec<_>>(), ScoreSource::EchoScored)
    } else {
        match fallback {
            Some(v) if !v.is_empty() => (v.to_vec(), ScoreSource::GenerationLogprobs),
            _ => {
                return Err(Error::Capability(format!(
                    "no echo-scoring and no generation logprobs for task {}",
                    task.id
                )))
            }
        }
    };
    Ok(EntropyScore {
        task_id: task.id.clone(),
        entropy: entropy(&values)?,
        token_count: values.len(),
        source,
    })
}

pub fn score_pseudo(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    task: &TaskRecord,
    pseudo: &PseudoResponse,
    warm: &ModelRef,
) -> Result<EntropyScore> {
    let text = pseudo.justified_text.as_deref().unwrap_or_default();
    score_text(chat, templates, task, text, warm, pseudo.justifier_logprobs.as_deref())
}

/// Score every decided pseudo-response. Unscoreable ones keep `score = None`
/// and a note in `meta`; they are excluded from selection.
pub fn score_pool(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    pool: &Dataset,
    pseudos: Vec<PseudoResponse>,
    warm: &ModelRef,
    concurrency: usize,
) -> Result<Vec<PseudoResponse>> {
    let results = par_map(&pseudos, concurrency, |p| {
        let mut p = p.clone();
        if !p.is_decided() {
            return Ok(p);
        }
        let task = pool
            .get(&p.task_id)
            .ok_or_else(|| Error::State(format!("pseudo-response for unknown task {}", p.task_id)))?;
        match score_pseudo(chat, templates, task, &p, warm) {
            Ok(s) => p.score = Some(s),
            Err(e @ (Error::Capability(_) | Error::Transport { .. } | Error::Provider { .. })) => {
                p.meta.insert("unscoreable".into(), e.to_string());
            }
            Err(e) => return Err(e),
        }
        Ok(p)
    })?;
    results.into_iter().collect()
}

/// Nearest-rank percentile: the value at 1-based rank ⌈θ/100·M⌉ of the
/// ascending sort.
pub fn percentile_threshold(values: &[f64], theta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Validation("percentile of an empty list".into()));
    }
    check_theta(theta)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("percentile over non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // Guard the product against float noise, e.g. 0.29 * 100 / 100.
    let raw = theta / 100.0 * m as f64;
    let rank = ((raw - 1e-9).ceil() as usize).clamp(1, m);
    Ok(sorted[rank - 1])
}

pub fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 100.0) {
        return Err(Error::Validation(format!("theta must be in (0, 100], got {theta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` uniform bins over [0, max]; the last bin is closed.
    pub fn uniform(values: &[f64], bins: usize) -> Self {
        let max = values.iter().copied().fold(0.0_f64, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 / bins as f64 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", self.edges[i], self.edges[i + 1]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSource {
    #[default]
    Unlabeled,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// `None` when nothing was scored.
    pub tau: Option<f64>,
    pub theta: f64,
    pub tau_source: TauSource,
    pub kept_ids: Vec<String>,
    pub dropped_ids: Vec<String>,
    /// Pseudo-responses that never reached scoring.
    pub excluded_ids: Vec<String>,
    pub histogram: Histogram,
}

/// Keep scored pseudo-responses with entropy ≤ τ. Undecided or unscoreable
/// ones must be filtered out beforehand.
pub fn select(
    pool: &Dataset,
    pseudos: &[PseudoResponse],
    tau: f64,
    theta: f64,
    tau_source: TauSource,
) -> Result<(Dataset, SelectionReport)> {
    let unscored: Vec<String> = pseudos
        .iter()
        .filter(|p| p.score.is_none())
        .map(|p| p.task_id.clone())
        .collect();
    if !unscored.is_empty() {
        return Err(Error::Precondition(format!("unscored pseudo-responses: {}", unscored.join(", "))));
    }
    let mut kept = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    let mut records = Vec::new();
    let mut sorted: Vec<&PseudoResponse> = pseudos.iter().collect();
    sorted.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    for p in sorted {
        let h = p.entropy().expect("checked above");
        if h <= tau {
            let task = pool.get(&p.task_id).ok_or_else(|| {
                Error::State(format!("selected task {} is not in the pool", p.task_id))
            })?;
            let answer = p.justified_answer.clone().ok_or_else(|| {
                Error::State(format!("scored task {} has no justified answer", p.task_id))
            })?;
            records.push(task.clone().with_answer(answer));
            kept.insert(p.task_id.clone());
        } else {
            dropped.insert(p.task_id.clone());
        }
    }
    let entropies: Vec<f64> = pseudos.iter().filter_map(PseudoResponse::entropy).collect();
    let report = SelectionReport {
        tau: Some(tau),
        theta,
        tau_source,
        kept_ids: kept.into_iter().collect(),
        dropped_ids: dropped.into_iter().collect(),
        excluded_ids: Vec::new(),
        histogram: Histogram::uniform(&entropies, HISTOGRAM_BINS),
    };
    Ok((Dataset::new(records, "selected")?, report))
}

/// Entropy of each labeled gold answer line under `model`, for the
/// labeled-data threshold variant.
pub fn score_labeled(
    chat: &dyn ChatBackend,
    templates: &TemplateSet,
    labeled: &Dataset,
    model: &ModelRef,
    concurrency: usize,
) -> Result<Vec<f64>> {
    let records: Vec<&TaskRecord> = labeled.iter().collect();
    let scores = par_map(&records, concurrency, |t| {
        let gold = t
            .answer
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("labeled task {} has no gold", t.id)))?;
        score_text(chat, templates, t, &answer_line(gold), model, None).map(|s| s.entropy)
    })?;
    scores.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::PseudoStatus;
    use crate::data::Answer;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(entropy(&[-0.5, -1.5]).unwrap(), 1.0);
        assert!(entropy(&[-0.2, f64::NAN]).is_err());
        assert!(entropy(&[0.1]).is_err());
        assert!(entropy(&[]).is_err());
    }

    #[test]
    fn nearest_rank() {
        let v = [0.4, 0.1, 0.3, 0.2];
        assert_eq!(percentile_threshold(&v, 50.0).unwrap(), 0.2);
        assert_eq!(percentile_threshold(&v, 100.0).unwrap(), 0.4);
        assert_eq!(percentile_threshold(&[0.7], 13.0).unwrap(), 0.7);
        assert!(percentile_threshold(&v, 0.0).is_err());
        assert!(percentile_threshold(&v, 150.0).is_err());
        assert!(percentile_threshold(&[], 50.0).is_err());
    }

    pub(crate) fn scored(id: &str, h: f64) -> PseudoResponse {
        PseudoResponse {
            task_id: id.into(),
            per_collaborator: vec![],
            status: PseudoStatus::Justified,
            justified_text: Some("Answer: A".into()),
            justified_answer: Some(Answer::choice('A')),
            justifier_logprobs: None,
            score: Some(EntropyScore {
                task_id: id.into(),
                entropy: h,
                token_count: 2,
                source: ScoreSource::EchoScored,
            }),
            meta: BTreeMap::new(),
        }
    }

    fn pool(ids: &[&str]) -> Dataset {
        Dataset::new(
            ids.iter()
                .map(|id| TaskRecord::new(*id, format!("q {id}")).with_options(["x", "y"]))
                .collect(),
            "pool",
        )
        .unwrap()
    }

    #[test]
    fn select_keeps_inclusive_and_sorted() {
        let ids = ["d", "a", "c", "b"];
        let ps = [scored("d", 0.4), scored("a", 0.1), scored("c", 0.3), scored("b", 0.2)];
        let (sel, report) = select(&pool(&ids), &ps, 0.2, 50.0, TauSource::Unlabeled).unwrap();
        assert_eq!(sel.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(report.kept_ids.len() + report.dropped_ids.len(), 4);
        assert!(sel.iter().all(|r| r.answer == Some(Answer::choice('A'))));
        let (none, _) = select(&pool(&ids), &ps, 0.05, 50.0, TauSource::Unlabeled).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn unscored_is_rejected() {
        let mut p = scored("a", 0.1);
        p.score = None;
        assert!(select(&pool(&["a"]), &[p], 1.0, 50.0, TauSource::Unlabeled).is_err());
    }

    #[test]
    fn histogram_has_twenty_bins_over_zero_to_max() {
        let h = Histogram::uniform(&[0.0, 0.5, 1.0, 2.0], HISTOGRAM_BINS);
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.edges.first(), Some(&0.0));
        assert_eq!(h.edges.last(), Some(&2.0));
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.counts[19], 1);
    }

    proptest! {
        #[test]
        fn entropy_invariant_under_duplication(v in prop::collection::vec(-20.0f64..=0.0, 1..50)) {
            let doubled: Vec<f64> = v.iter().chain(v.iter()).copied().collect();
            prop_assert!((entropy(&v).unwrap() - entropy(&doubled).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn threshold_is_an_element_with_rank_property(v in prop::collection::vec(0.0f64..10.0, 1..80), theta in 0.01f64..=100.0) {
            let tau = percentile_threshold(&v, theta).unwrap();
            prop_assert!(v.contains(&tau));
            let at_or_below = v.iter().filter(|x| **x <= tau).count();
            let need = (theta / 100.0 * v.len() as f64 - 1e-9).ceil().max(1.0) as usize;
            prop_assert!(at_or_below >= need);
        }
    }
}
