use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{ConfidenceModel, WorldSpec, NOISE_DIMS};
use crate::backend::{
    check_embed_request, check_score_args, validate_training_file, ChatBackend, ChatRequest,
    ChatResponse, EmbeddingRequest, Embedder, FineTuneJob, FineTuner, JobStatus, ModelRef,
    ModelRole, Role, Services, TokenLogprob,
};
use crate::data::{write_atomic, AnswerKind};
use crate::error::{Error, Result};
use crate::evaluation::extract_answer;
use crate::hashing::{rng_from_digest, stable_hash, stable_hash_hex};

pub const SIM_BASE: &str = "sim-base";
/// Built-in model answering at the oracle's warm accuracy everywhere.
pub const SIM_WARM: &str = "sim-warm";
pub const SIM_EMBEDDING: &str = "sim-embed";
const LABEL: &str = "simulated";

static QUESTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Question:\n([^\n]*)\n\n").unwrap());
static ANSWERS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)Multiple Answers:\n(.*?)\n\nNow, please give me the final correct answer:").unwrap()
});
static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\d+\. (.*)$").unwrap());
static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*\S+").unwrap());

const FILLERS: [&str; 6] = [
    "Considering each option in turn.",
    "Recalling the relevant facts for this topic.",
    "Eliminating the options that cannot hold.",
    "Comparing the remaining candidates.",
    "Checking the property against the definition.",
    "Working from what is known about this item.",
];

struct TaskInfo {
    id: String,
    cluster: usize,
    gold: char,
    letters: Vec<char>,
}

/// Tokenization used for simulated logprobs: runs of non-space characters
/// with their leading whitespace.
pub(crate) fn sim_tokens(text: &str) -> Vec<&str> {
    TOKEN.find_iter(text).map(|m| m.as_str()).collect()
}

/// Simulated chat, scoring, embedding and fine-tuning over one world.
/// Every output is a pure function of the world seed and the request.
pub struct SimBackend {
    spec: WorldSpec,
    tasks: HashMap<String, TaskInfo>,
    models: RwLock<BTreeMap<String, Vec<f64>>>,
    registry: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl SimBackend {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.oracle.validate()?;
        let dataset = spec.tasks()?;
        let mut tasks = HashMap::with_capacity(dataset.len());
        for (pos, t) in dataset.iter().enumerate() {
            let gold = t
                .answer
                .as_ref()
                .and_then(|a| a.as_choice())
                .expect("generated tasks carry a letter");
            tasks.insert(
                t.question.clone(),
                TaskInfo {
                    id: t.id.clone(),
                    cluster: pos / spec.per_cluster,
                    gold,
                    letters: t.options.iter().map(|o| o.letter).collect(),
                },
            );
        }
        let mut models = BTreeMap::new();
        models.insert(SIM_BASE.to_string(), vec![spec.oracle.accuracy_base; spec.clusters]);
        models.insert(SIM_WARM.to_string(), vec![spec.oracle.accuracy_warm; spec.clusters]);
        Ok(SimBackend {
            spec,
            tasks,
            models: RwLock::new(models),
            registry: None,
            write_lock: Mutex::new(()),
        })
    }

    /// Persist fine-tuned models to `path` so another process sharing the
    /// file sees them.
    pub fn with_registry(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let stored: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            })?;
            self.models.get_mut().expect("fresh lock").extend(stored);
        }
        self.registry = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn label(&self) -> &'static str {
        LABEL
    }

    pub fn base_model(&self) -> ModelRef {
        ModelRef::base(SIM_BASE, LABEL)
    }

    pub fn services(self: Arc<Self>) -> Services {
        Services {
            chat: self.clone(),
            embedder: self.clone(),
            finetuner: self,
            embedding_model: SIM_EMBEDDING.to_string(),
            backend_label: LABEL.to_string(),
        }
    }

    /// Accuracy of `model` on `cluster` before reference bonuses.
    pub fn model_accuracy(&self, model: &str, cluster: usize) -> Option<f64> {
        self.models.read().unwrap().get(model).and_then(|a| a.get(cluster).copied())
    }

    pub fn cluster_of(&self, question: &str) -> Option<usize> {
        self.tasks.get(question).map(|t| t.cluster)
    }

    fn accuracies(&self, model: &str) -> Result<Vec<f64>> {
        self.models
            .read()
            .unwrap()
            .get(model)
            .cloned()
            .ok_or_else(|| Error::Simulation(format!("unknown model {model:?}")))
    }

    fn find_task(&self, text: &str) -> Result<&TaskInfo> {
        let q = QUESTION
            .captures(text)
            .ok_or_else(|| Error::Simulation("prompt has no recognizable question block".into()))?;
        self.tasks
            .get(&q[1])
            .ok_or_else(|| Error::Simulation(format!("prompt names an unknown task: {:?}", &q[1])))
    }

    fn seed_bytes(&self) -> [u8; 8] {
        self.spec.oracle.seed.to_le_bytes()
    }

    fn token_logprobs(&self, rng: &mut ChaCha8Rng, text: &str, correct: bool) -> Vec<TokenLogprob> {
        let conf: &ConfidenceModel = &self.spec.oracle.confidence;
        let (lo, hi) = conf.band(correct);
        let a = conf.response_noise;
        let offset = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
        sim_tokens(text)
            .into_iter()
            .map(|token| {
                let p: f64 = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let nll = (-p.ln() + offset).max(0.0);
                TokenLogprob {
                    token: token.to_string(),
                    logprob: if nll == 0.0 { 0.0 } else { -nll },
                }
            })
            .collect()
    }

    fn respond(
        &self,
        rng: &mut ChaCha8Rng,
        letter: char,
        correct: bool,
        want_logprobs: bool,
    ) -> ChatResponse {
        let filler = FILLERS[rng.random_range(0..FILLERS.len())];
        let text = format!("{filler}\nAnswer: {letter}");
        let token_logprobs = want_logprobs.then(|| self.token_logprobs(rng, &text, correct));
        ChatResponse {
            text,
            token_logprobs,
            finish_reason: "stop".into(),
        }
    }

    fn justify(&self, req: &ChatRequest, prompt: &str) -> Result<ChatResponse> {
        let task = self.find_task(prompt)?;
        let block = ANSWERS
            .captures(prompt)
            .ok_or_else(|| Error::Simulation("self-justify prompt without an answer list".into()))?;
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for line in NUMBERED.captures_iter(&block[1]) {
            if let Some(letter) = extract_answer(&line[1], AnswerKind::Choice).and_then(|a| a.as_choice()) {
                *counts.entry(letter).or_default() += 1;
            }
        }
        // BTreeMap iterates letters ascending; keep the first maximum.
        let letter = counts
            .iter()
            .fold(None::<(char, usize)>, |best, (l, c)| match best {
                Some((_, bc)) if bc >= *c => best,
                _ => Some((*l, *c)),
            })
            .map(|(l, _)| l)
            .ok_or_else(|| Error::Simulation("self-justify prompt lists no answers".into()))?;
        let mut rng = rng_from_digest(stable_hash([
            &self.seed_bytes()[..],
            b"justify",
            req.model.as_bytes(),
            serde_json::to_string(req).expect("requests serialize").as_bytes(),
        ]));
        Ok(self.respond(&mut rng, letter, letter == task.gold, req.want_logprobs))
    }
}

impl ChatBackend for SimBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let accuracies = self.accuracies(&req.model)?;
        let prompt = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| Error::Simulation("request has no user message".into()))?;
        if prompt.contains("Multiple Answers:") {
            return self.justify(req, prompt);
        }
        let task = self.find_task(prompt)?;
        let refs = req
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .flat_map(|m| QUESTION.captures_iter(&m.content))
            .filter(|c| self.tasks.get(&c[1]).is_some_and(|t| t.cluster == task.cluster))
            .count();
        let accuracy =
            (accuracies[task.cluster] + self.spec.oracle.icl_bonus * refs as f64).min(1.0);
        // Greedy unseeded calls share one draw per task across models, so a
        // more accurate model is correct on a superset of tasks.
        let digest = if req.temperature == 0.0 && req.seed.is_none() {
            stable_hash([&self.seed_bytes()[..], b"greedy", task.id.as_bytes()])
        } else {
            stable_hash([
                &self.seed_bytes()[..],
                b"chat",
                &req.seed.unwrap_or(0).to_le_bytes()[..],
                serde_json::to_string(req).expect("requests serialize").as_bytes(),
            ])
        };
        let mut rng = rng_from_digest(digest);
        let correct = rng.random::<f64>() < accuracy;
        let letter = if correct {
            task.gold
        } else {
            let wrong: Vec<char> = task.letters.iter().copied().filter(|l| *l != task.gold).collect();
            wrong[rng.random_range(0..wrong.len())]
        };
        Ok(self.respond(&mut rng, letter, correct, req.want_logprobs))
    }

    fn score_completion(&self, model: &str, prompt: &str, completion: &str) -> Result<Vec<TokenLogprob>> {
        check_score_args(completion)?;
        self.accuracies(model)?;
        let task = self.find_task(prompt)?;
        let correct = extract_answer(completion, AnswerKind::Choice).and_then(|a| a.as_choice())
            == Some(task.gold);
        let mut rng = rng_from_digest(stable_hash([
            &self.seed_bytes()[..],
            b"score",
            model.as_bytes(),
            prompt.as_bytes(),
            completion.as_bytes(),
        ]));
        let out = self.token_logprobs(&mut rng, completion, correct);
        if out.is_empty() {
            return Err(Error::Precondition("completion has no tokens".into()));
        }
        Ok(out)
    }

    fn supports_echo_scoring(&self) -> bool {
        true
    }
}

impl SimBackend {
    fn vector(&self, text: &str) -> Vec<f64> {
        let dim = self.spec.clusters + NOISE_DIMS;
        let mut rng = rng_from_digest(stable_hash([&self.seed_bytes()[..], b"embed", text.as_bytes()]));
        let mut unit = |n: usize| {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        match self.tasks.get(text) {
            Some(t) => {
                let mut v = vec![0.0; dim];
                v[t.cluster] = 1.0;
                for (slot, x) in v[self.spec.clusters..].iter_mut().zip(unit(NOISE_DIMS)) {
                    *slot = 0.2 * x;
                }
                v
            }
            None => unit(dim),
        }
    }
}

impl Embedder for SimBackend {
    fn embed(&self, req: &EmbeddingRequest) -> Result<Vec<Vec<f64>>> {
        check_embed_request(req)?;
        if req.model != SIM_EMBEDDING {
            return Err(Error::Simulation(format!("unknown embedding model {:?}", req.model)));
        }
        Ok(req.texts.iter().map(|t| self.vector(t)).collect())
    }
}

impl FineTuner for SimBackend {
    fn start_finetune(
        &self,
        base: &ModelRef,
        training_file: &Path,
        epochs: u32,
        target: ModelRole,
    ) -> Result<FineTuneJob> {
        let examples = validate_training_file(training_file)?;
        let start = self.accuracies(&base.name)?;
        let mut correct = vec![0usize; self.spec.clusters];
        let mut wrong = vec![0usize; self.spec.clusters];
        for ex in &examples {
            let task = self.find_task(ex.user_content().unwrap_or_default())?;
            let said = extract_answer(ex.assistant_content().unwrap_or_default(), AnswerKind::Choice)
                .and_then(|a| a.as_choice());
            if said == Some(task.gold) {
                correct[task.cluster] += 1;
            } else {
                wrong[task.cluster] += 1;
            }
        }
        let tuned: Vec<f64> = (0..self.spec.clusters)
            .map(|c| self.spec.oracle.tuned_accuracy(start[c], correct[c], wrong[c]))
            .collect();
        let bytes = fs::read(training_file).map_err(|e| Error::io(training_file, e))?;
        let digest = stable_hash_hex([base.name.as_bytes(), &bytes[..]]);
        let name = format!("{}-ft-{}", base.name, &digest[..12]);
        let id = format!("simjob-{}", &digest[..12]);
        {
            let _guard = self.write_lock.lock().unwrap();
            let mut models = self.models.write().unwrap();
            models.insert(name.clone(), tuned);
            if let Some(path) = &self.registry {
                let tuned_only: BTreeMap<&String, &Vec<f64>> = models
                    .iter()
                    .filter(|(k, _)| k.as_str() != SIM_BASE && k.as_str() != SIM_WARM)
                    .collect();
                write_atomic(path, serde_json::to_string_pretty(&tuned_only).expect("registry serializes").as_bytes())?;
            }
        }
        Ok(FineTuneJob {
            id: id.clone(),
            base: base.clone(),
            training_file: training_file.to_path_buf(),
            epochs,
            target_role: target,
            status: JobStatus::Succeeded,
            result: Some(ModelRef {
                name,
                role: target,
                backend: LABEL.to_string(),
                job: Some(id),
            }),
            error: None,
        })
    }

    fn poll(&self, job: &FineTuneJob) -> Result<FineTuneJob> {
        Ok(job.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatMessage;
    use crate::prompting::{render_task, TemplateSet};
    use crate::retrieval::cosine;

    fn world() -> SimBackend {
        SimBackend::new(WorldSpec { clusters: 4, per_cluster: 10, ..Default::default() }.with_seed(9)).unwrap()
    }

    #[test]
    fn same_request_same_response() {
        let sim = world();
        let task = sim.spec().tasks().unwrap().records[0].clone();
        let mut req = ChatRequest::new(SIM_BASE, render_task(&TemplateSet::embedded(), &task, &[]).unwrap());
        req.want_logprobs = true;
        req.temperature = 1.0;
        req.seed = Some(4);
        let a = sim.chat(&req).unwrap();
        assert_eq!(a, sim.chat(&req).unwrap());
        let lps = a.token_logprobs.unwrap();
        assert_eq!(lps.len(), sim_tokens(&a.text).len());
        assert!(lps.iter().all(|t| t.logprob <= 0.0));
    }

    #[test]
    fn embeddings_cluster() {
        let sim = world();
        let tasks = sim.spec().tasks().unwrap();
        let q: Vec<String> = tasks.iter().map(|t| t.question.clone()).collect();
        let v = sim.embed(&EmbeddingRequest { model: SIM_EMBEDDING.into(), texts: q }).unwrap();
        for i in 0..v.len() {
            for j in 0..i {
                let s = cosine(&v[i], &v[j]);
                if i / 10 == j / 10 {
                    assert!(s >= 0.9, "{s}");
                } else {
                    assert!(s <= 0.1, "{s}");
                }
            }
        }
    }

    #[test]
    fn unknown_prompt_is_a_simulation_error() {
        let sim = world();
        let req = ChatRequest::new(SIM_BASE, vec![ChatMessage::user("hello")]);
        assert!(matches!(sim.chat(&req), Err(Error::Simulation(_))));
    }
}
