//! Task records, JSONL ingestion and emission, splitting and merging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::rng_from_seed;

pub use crate::evaluation::SealedGold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Choice,
    Numeric,
    Text,
}

/// A gold or predicted answer. The variant is the answer kind, so exactly one
/// payload field is populated by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Answer {
    Choice { choice: char },
    Numeric { value: f64 },
    Text { text: String },
}

impl Answer {
    pub fn choice(letter: char) -> Self {
        Answer::Choice { choice: letter }
    }

    pub fn numeric(value: f64) -> Self {
        Answer::Numeric { value }
    }

    pub fn kind(&self) -> AnswerKind {
        match self {
            Answer::Choice { .. } => AnswerKind::Choice,
            Answer::Numeric { .. } => AnswerKind::Numeric,
            Answer::Text { .. } => AnswerKind::Text,
        }
    }

    pub fn as_choice(&self) -> Option<char> {
        match self {
            Answer::Choice { choice } => Some(*choice),
            _ => None,
        }
    }

    pub fn as_numeric(&self) -> Option<f64> {
        match self {
            Answer::Numeric { value } => Some(*value),
            _ => None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            Answer::Choice { choice } if !choice.is_ascii_uppercase() => {
                Err(format!("choice answer '{choice}' is not an uppercase letter"))
            }
            Answer::Numeric { value } if !value.is_finite() => {
                Err("numeric answer is not finite".to_string())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Choice { choice } => write!(f, "{choice}"),
            Answer::Numeric { value } => write!(f, "{value}"),
            Answer::Text { text } => f.write_str(text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOption {
    pub letter: char,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub options: Vec<TaskOption>,
    /// Gold answer, absent for unlabeled working copies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl TaskRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        TaskRecord {
            id: id.into(),
            question: question.into(),
            options: Vec::new(),
            answer: None,
            meta: BTreeMap::new(),
            split: None,
        }
    }

    pub fn with_options<S: Into<String>>(mut self, texts: impl IntoIterator<Item = S>) -> Self {
        self.options = texts
            .into_iter()
            .zip('A'..='Z')
            .map(|(text, letter)| TaskOption {
                letter,
                text: text.into(),
            })
            .collect();
        self
    }

    pub fn with_answer(mut self, answer: Answer) -> Self {
        self.answer = Some(answer);
        self
    }

    pub fn is_multiple_choice(&self) -> bool {
        !self.options.is_empty()
    }

    /// Answer kind expected from a model for this task.
    pub fn expected_kind(&self) -> AnswerKind {
        match &self.answer {
            Some(a) => a.kind(),
            None if self.is_multiple_choice() => AnswerKind::Choice,
            None => AnswerKind::Numeric,
        }
    }

    pub fn category(&self) -> Option<&str> {
        self.meta.get("category").map(String::as_str)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        for (opt, expected) in self.options.iter().zip('A'..='J') {
            if opt.letter != expected {
                return Err(format!(
                    "option letters must run A.. without gaps; found '{}' where '{}' expected",
                    opt.letter, expected
                ));
            }
        }
        if self.options.len() > 10 {
            return Err("at most 10 options (A..J) are supported".into());
        }
        if let Some(answer) = &self.answer {
            answer.validate()?;
            if let (Some(letter), false) = (answer.as_choice(), self.options.is_empty()) {
                if !self.options.iter().any(|o| o.letter == letter) {
                    return Err(format!("gold answer '{letter}' is not one of the options"));
                }
            }
        }
        Ok(())
    }
}

/// Record as it appears on disk, where `id` may be omitted.
#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    question: String,
    #[serde(default)]
    options: Vec<TaskOption>,
    #[serde(default)]
    answer: Option<Answer>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<TaskRecord>,
    pub provenance: String,
}

impl Dataset {
    /// Build a dataset, rejecting duplicate ids.
    pub fn new(records: Vec<TaskRecord>, provenance: impl Into<String>) -> Result<Self> {
        let dups = duplicate_ids(records.iter().map(|r| r.id.as_str()));
        if !dups.is_empty() {
            return Err(Error::DuplicateId(dups));
        }
        Ok(Dataset {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn empty(provenance: impl Into<String>) -> Self {
        Dataset {
            records: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaskRecord> {
        self.records.iter()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&TaskRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("task records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Records whose id is not in `ids`, preserving order.
    pub fn without_ids(&self, ids: &BTreeSet<String>, provenance: impl Into<String>) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| !ids.contains(&r.id))
                .cloned()
                .collect(),
            provenance: provenance.into(),
        }
    }
}

fn duplicate_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dups.insert(id.to_string());
        }
    }
    dups.into_iter().collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parse JSONL text. Blank lines are skipped but still counted for line numbers.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Dataset> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "record".to_string());
    let mut records = Vec::new();
    let mut explicit = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = match raw.id {
            Some(id) => {
                if !explicit.insert(id.clone()) {
                    return Err(Error::DuplicateId(vec![id]));
                }
                id
            }
            None => format!("{stem}-{line_no}"),
        };
        let record = TaskRecord {
            id,
            question: raw.question,
            options: raw.options,
            answer: raw.answer,
            meta: raw.meta,
            split: raw.split,
        };
        record.validate().map_err(parse_err)?;
        records.push(record);
    }
    // synthesized ids may still collide with explicit ones
    Dataset::new(records, path.display().to_string())
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

/// Relative sizes of the labeled, unlabeled and test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub labeled: f64,
    pub unlabeled: f64,
    pub test: f64,
}

impl SplitRatio {
    pub const fn new(labeled: f64, unlabeled: f64, test: f64) -> Self {
        SplitRatio {
            labeled,
            unlabeled,
            test,
        }
    }

    /// Partition sizes: floor of each share, remainder handed out
    /// labeled, unlabeled, test in turn.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let weights = [self.labeled, self.unlabeled, self.test];
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Validation(format!(
                "split weights must be positive, got {}:{}:{}",
                self.labeled, self.unlabeled, self.test
            )));
        }
        let total: f64 = weights.iter().sum();
        let mut sizes = weights.map(|w| ((w * n as f64) / total + 1e-9).floor() as usize);
        let mut remainder = n - sizes.iter().sum::<usize>();
        let mut slot = 0;
        while remainder > 0 {
            sizes[slot % 3] += 1;
            remainder -= 1;
            slot += 1;
        }
        Ok(sizes)
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio::new(2.0, 6.0, 2.0)
    }
}

#[derive(Debug, Clone)]
pub struct SplitOutput {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub sealed: SealedGold,
}

/// Seeded shuffle-and-cut. Each partition keeps the input's relative order.
pub fn split(dataset: &Dataset, ratio: SplitRatio, seed: u64) -> Result<SplitOutput> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Precondition("cannot split an empty dataset".into()));
    }
    let sizes = ratio.sizes(n)?;
    if n < 3 {
        return Err(Error::Precondition(format!(
            "need at least 3 records to split, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut assignment = vec![Split::Labeled; n];
    for &idx in &order[sizes[0]..sizes[0] + sizes[1]] {
        assignment[idx] = Split::Unlabeled;
    }
    for &idx in &order[sizes[0] + sizes[1]..] {
        assignment[idx] = Split::Test;
    }

    let mut labeled = Vec::with_capacity(sizes[0]);
    let mut unlabeled = Vec::with_capacity(sizes[1]);
    let mut test = Vec::with_capacity(sizes[2]);
    let mut sealed = SealedGold::default();
    for (record, part) in dataset.records.iter().zip(assignment) {
        let mut record = record.clone();
        record.split = Some(part);
        match part {
            Split::Labeled => labeled.push(record),
            Split::Unlabeled => {
                if let Some(gold) = record.answer.take() {
                    sealed.insert(record.id.clone(), gold);
                }
                unlabeled.push(record);
            }
            Split::Test => test.push(record),
        }
    }

    let source = &dataset.provenance;
    Ok(SplitOutput {
        labeled: Dataset {
            records: labeled,
            provenance: format!("{source}#labeled"),
        },
        unlabeled: Dataset {
            records: unlabeled,
            provenance: format!("{source}#unlabeled"),
        },
        test: Dataset {
            records: test,
            provenance: format!("{source}#test"),
        },
        sealed,
    })
}

/// Concatenate two datasets with disjoint ids.
pub fn merge(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if b.is_empty() {
        return Ok(a.clone());
    }
    let a_ids = a.ids();
    let overlap: Vec<String> = b
        .records
        .iter()
        .filter(|r| a_ids.contains(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::DuplicateId(overlap));
    }
    let mut records = a.records.clone();
    records.extend(b.records.iter().cloned());
    Ok(Dataset {
        records,
        provenance: format!("{}+{}", a.provenance, b.provenance),
    })
}
