//! Deterministic simulated model services and synthetic task worlds.

mod backend;
mod scripted;
pub mod server;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Answer, Dataset, TaskRecord};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;

pub use backend::{SimBackend, SIM_BASE, SIM_EMBEDDING, SIM_WARM};
pub use scripted::ScriptedBackend;
pub use server::MockServer;

pub const NOISE_DIMS: usize = 32;

/// Per-token probability bands by correctness, plus a per-response offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub correct_low: f64,
    pub correct_high: f64,
    pub wrong_low: f64,
    pub wrong_high: f64,
    /// Half-width of the uniform NLL offset added to every token of a response.
    pub response_noise: f64,
    /// Swap the bands so wrong answers look confident.
    pub miscalibrated: bool,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            correct_low: 0.55,
            correct_high: 0.99,
            wrong_low: 0.2,
            wrong_high: 0.7,
            response_noise: 0.5,
            miscalibrated: false,
        }
    }
}

impl ConfidenceModel {
    /// Expected per-token NLL of a uniform(lo, hi) probability.
    pub fn mean_nll(lo: f64, hi: f64) -> f64 {
        let f = |p: f64| p - p * p.ln();
        (f(hi) - f(lo)) / (hi - lo)
    }

    pub fn separation(&self) -> f64 {
        Self::mean_nll(self.wrong_low, self.wrong_high)
            - Self::mean_nll(self.correct_low, self.correct_high)
    }

    fn band(&self, correct: bool) -> (f64, f64) {
        if correct != self.miscalibrated {
            (self.correct_low, self.correct_high)
        } else {
            (self.wrong_low, self.wrong_high)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub accuracy_base: f64,
    pub accuracy_warm: f64,
    /// Accuracy added per same-cluster reference in the prompt.
    pub icl_bonus: f64,
    /// Accuracy gained at full cluster coverage by fine-tuning.
    pub gain: f64,
    /// Net correct examples per cluster for full coverage.
    pub saturation: f64,
    /// Weight of a wrong training label against a correct one.
    pub wrong_weight: f64,
    pub confidence: ConfidenceModel,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            accuracy_base: 0.45,
            accuracy_warm: 0.6,
            icl_bonus: 0.08,
            gain: 0.4,
            saturation: 40.0,
            wrong_weight: 3.0,
            confidence: ConfidenceModel::default(),
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("accuracy_base", self.accuracy_base)?;
        unit("accuracy_warm", self.accuracy_warm)?;
        if self.accuracy_warm < self.accuracy_base {
            return Err(Error::Validation("accuracy_warm must be at least accuracy_base".into()));
        }
        if !(self.icl_bonus >= 0.0 && self.gain >= 0.0 && self.wrong_weight >= 0.0) {
            return Err(Error::Validation("icl_bonus, gain and wrong_weight must be nonnegative".into()));
        }
        if !(self.saturation > 0.0) {
            return Err(Error::Validation("saturation must be positive".into()));
        }
        let c = &self.confidence;
        for (name, lo, hi) in [
            ("correct", c.correct_low, c.correct_high),
            ("wrong", c.wrong_low, c.wrong_high),
        ] {
            if !(0.0 < lo && lo < hi && hi <= 1.0) {
                return Err(Error::Validation(format!(
                    "{name} probability band must satisfy 0 < low < high ≤ 1"
                )));
            }
        }
        if !(c.response_noise >= 0.0) {
            return Err(Error::Validation("response_noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Accuracy after fine-tuning from `start` with `correct` and `wrong`
    /// labels in one cluster.
    pub fn tuned_accuracy(&self, start: f64, correct: usize, wrong: usize) -> f64 {
        let net = correct as f64 - self.wrong_weight * wrong as f64;
        (start + self.gain * (net / self.saturation).clamp(-1.0, 1.0)).clamp(0.0, 1.0)
    }
}

/// A synthetic world: task clusters plus the oracle driving simulated models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub oracle: OracleSpec,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            clusters: 10,
            per_cluster: 50,
            oracle: OracleSpec::default(),
        }
    }
}

impl WorldSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.oracle.seed = seed;
        self
    }

    pub fn tasks(&self) -> Result<Dataset> {
        gen_tasks(self.clusters, self.per_cluster, self.oracle.seed)
    }
}

pub fn task_id(cluster: usize, i: usize) -> String {
    format!("c{cluster:02}-t{i:03}")
}

const SUBJECTS: [&str; 8] = [
    "alloy", "enzyme", "statute", "ledger", "orbit", "lexeme", "glacier", "protocol",
];

/// `clusters × per_cluster` four-option tasks with uniform gold letters.
pub fn gen_tasks(clusters: usize, per_cluster: usize, seed: u64) -> Result<Dataset> {
    if clusters == 0 || per_cluster == 0 {
        return Err(Error::Validation("clusters and per_cluster must be at least 1".into()));
    }
    let mut rng = crate::hashing::rng_from_seed(derive_seed(seed, &["tasks"]));
    let mut records = Vec::with_capacity(clusters * per_cluster);
    for c in 0..clusters {
        for i in 0..per_cluster {
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            let serial: u32 = rng.random();
            let question = format!(
                "In topic {c:02}, which property of {subject} #{i:03}-{serial:08x} holds?"
            );
            let options: Vec<String> = (0..4u8)
                .map(|o| format!("property {}-{}", (b'p' + o) as char, rng.random_range(100..1000)))
                .collect();
            let gold = (b'A' + rng.random_range(0..4u8)) as char;
            let mut record = TaskRecord::new(task_id(c, i), question)
                .with_options(options)
                .with_answer(Answer::choice(gold));
            record.meta.insert("category".into(), format!("topic-{c:02}"));
            records.push(record);
        }
    }
    Dataset::new(records, format!("simlab:{clusters}x{per_cluster}:{seed}"))
}
