//! Run configuration: TOML file plus overrides, validated up front.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{CommandFineTuner, HttpBackend, HttpConfig, ModelRef, ModelRole, RetryPolicy, Services};
use crate::collab::{Ablation, DEFAULT_N, DEFAULT_TEMPERATURE};
use crate::data::SplitRatio;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_NUMERIC_TOL;
use crate::prompting::{TemplateSet, PARAPHRASES};
use crate::retrieval::DEFAULT_K;
use crate::selection::{check_theta, TauSource, DEFAULT_THETA};
use crate::simlab::{SimBackend, WorldSpec, SIM_BASE};

pub const DEFAULT_EPOCHS: u32 = 2;
pub const SIM_REGISTRY_FILE: &str = "sim_registry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workdir: PathBuf,
    /// Root seed; every stage seed derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub method: MethodConfig,
    pub backend: BackendConfig,
    /// Synthetic world used by the simulated backend.
    pub world: WorldSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workdir: PathBuf::from("work"),
            seed: 0,
            data: DataConfig::default(),
            method: MethodConfig::default(),
            backend: BackendConfig::default(),
            world: WorldSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source JSONL; when absent with the simulated backend, the world's tasks.
    pub input: Option<PathBuf>,
    /// labeled : unlabeled : test weights.
    pub ratio: [f64; 3],
    /// Defaults to the root seed.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            ratio: [2.0, 6.0, 2.0],
            split_seed: None,
        }
    }
}

impl DataConfig {
    pub fn split_ratio(&self) -> SplitRatio {
        SplitRatio::new(self.ratio[0], self.ratio[1], self.ratio[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub n: usize,
    pub k: usize,
    /// Percentile in (0, 100].
    pub theta: f64,
    pub epochs: u32,
    pub rounds: usize,
    pub tau_source: TauSource,
    pub numeric_tol: f64,
    /// Collaborator sampling temperature.
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub eval_targets: Vec<ModelRole>,
    pub eval_variants: usize,
    /// Give evaluated models retrieved references from the labeled set.
    pub eval_icl: bool,
    pub ablation: Ablation,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            n: DEFAULT_N,
            k: DEFAULT_K,
            theta: DEFAULT_THETA,
            epochs: DEFAULT_EPOCHS,
            rounds: 1,
            tau_source: TauSource::Unlabeled,
            numeric_tol: DEFAULT_NUMERIC_TOL,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 512,
            concurrency: 8,
            eval_targets: vec![ModelRole::Evolved],
            eval_variants: 1,
            eval_icl: false,
            ablation: Ablation::None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Simulated,
    Http,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    #[default]
    Simulated,
    Hosted,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_model: Option<String>,
    pub embedding_model: Option<String>,
    /// Directory of template overrides.
    pub templates_dir: Option<PathBuf>,
    pub http: HttpSection,
    pub finetune: FineTuneSection,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulated,
            base_model: None,
            embedding_model: None,
            templates_dir: None,
            http: HttpSection::default(),
            finetune: FineTuneSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSection {
    pub base_url: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub echo_scoring: bool,
}

impl Default for HttpSection {
    fn default() -> Self {
        HttpSection {
            base_url: "http://127.0.0.1:8000".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            retries: 3,
            backoff_ms: 1000,
            max_in_flight: 8,
            echo_scoring: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub mode: FineTuneMode,
    /// Program and arguments for command mode.
    pub command: Vec<String>,
    pub poll_interval_secs: u64,
    pub timeout_secs: u64,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        FineTuneSection {
            mode: FineTuneMode::Simulated,
            command: Vec::new(),
            poll_interval_secs: 10,
            timeout_secs: 24 * 3600,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.seed)
    }

    /// θ actually applied: the no-selection ablation keeps everything.
    pub fn effective_theta(&self) -> f64 {
        if self.method.ablation == Ablation::NoSelection {
            100.0
        } else {
            self.method.theta
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.method;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.n < 2 && m.ablation != Ablation::SingleCollaborator {
            return bad(format!("n must be at least 2, got {}", m.n));
        }
        if m.k < 1 {
            return bad("k must be at least 1".into());
        }
        check_theta(m.theta).map_err(|_| Error::Config(format!("theta must be in (0, 100], got {}", m.theta)))?;
        if m.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if m.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if m.concurrency < 1 {
            return bad("concurrency must be at least 1".into());
        }
        if !(m.numeric_tol >= 0.0 && m.numeric_tol.is_finite()) {
            return bad(format!("numeric_tol must be a nonnegative number, got {}", m.numeric_tol));
        }
        if !(m.temperature >= 0.0 && m.temperature.is_finite()) {
            return bad(format!("temperature must be nonnegative, got {}", m.temperature));
        }
        if m.max_tokens == 0 {
            return bad("max_tokens must be positive".into());
        }
        if m.eval_variants == 0 || m.eval_variants > PARAPHRASES.len() + 1 {
            return bad(format!("eval_variants must be in 1..={}", PARAPHRASES.len() + 1));
        }
        if m.eval_targets.is_empty() {
            return bad("eval_targets is empty".into());
        }
        if self.data.ratio.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("split ratio weights must be positive, got {:?}", self.data.ratio));
        }
        let b = &self.backend;
        match (b.kind, b.finetune.mode) {
            (BackendKind::Simulated, FineTuneMode::Simulated) => self.world.oracle.validate()?,
            (BackendKind::Simulated, mode) => {
                return bad(format!("the simulated backend only supports simulated fine-tuning, not {mode:?}"))
            }
            (BackendKind::Http, FineTuneMode::Simulated) => {
                return bad("the http backend needs finetune.mode = \"hosted\" or \"command\"".into())
            }
            (BackendKind::Http, _) => {
                if b.base_model.is_none() || b.embedding_model.is_none() {
                    return bad("the http backend needs base_model and embedding_model".into());
                }
            }
        }
        if b.finetune.mode == FineTuneMode::Command && b.finetune.command.is_empty() {
            return bad("finetune.command is empty".into());
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.backend.templates_dir {
            Some(dir) => TemplateSet::from_dir(dir),
            None => Ok(TemplateSet::embedded()),
        }
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_secs(self.backend.finetune.poll_interval_secs)
    }

    pub fn finetune_timeout(&self) -> Duration {
        Duration::from_secs(self.backend.finetune.timeout_secs)
    }
}

/// Build the configured services and the base model reference.
pub fn services_from_config(cfg: &RunConfig) -> Result<(Services, ModelRef)> {
    let b = &cfg.backend;
    match b.kind {
        BackendKind::Simulated => {
            fs::create_dir_all(&cfg.workdir).map_err(|e| Error::io(&cfg.workdir, e))?;
            let sim = SimBackend::new(cfg.world.clone())?
                .with_registry(&cfg.workdir.join(SIM_REGISTRY_FILE))?;
            let base = ModelRef::base(b.base_model.as_deref().unwrap_or(SIM_BASE), sim.label());
            Ok((Arc::new(sim).services(), base))
        }
        BackendKind::Http => {
            let h = &b.http;
            let mut config = HttpConfig::new(h.base_url.clone());
            config.api_key = std::env::var(&h.api_key_env).ok().filter(|k| !k.is_empty());
            config.timeout = Duration::from_secs(h.timeout_secs);
            config.retry = RetryPolicy {
                attempts: h.retries.max(1),
                initial_backoff: Duration::from_millis(h.backoff_ms),
            };
            config.max_in_flight = h.max_in_flight.max(1);
            config.echo_scoring = h.echo_scoring;
            let http = Arc::new(HttpBackend::new(config)?);
            let label = http.label().to_string();
            let finetuner: Arc<dyn crate::backend::FineTuner> = match b.finetune.mode {
                FineTuneMode::Command => Arc::new(CommandFineTuner::new(
                    &b.finetune.command,
                    cfg.workdir.join("trainer"),
                )?),
                _ => http.clone(),
            };
            let base_name = b.base_model.clone().ok_or_else(|| Error::Config("base_model is required".into()))?;
            let services = Services {
                chat: http.clone(),
                embedder: http,
                finetuner,
                embedding_model: b
                    .embedding_model
                    .clone()
                    .ok_or_else(|| Error::Config("embedding_model is required".into()))?,
                backend_label: label.clone(),
            };
            Ok((services, ModelRef::base(base_name, label)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.method.n, cfg.method.k, cfg.method.theta, cfg.method.epochs, cfg.method.rounds), (4, 3, 50.0, 2, 1));
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[method]\ntheta = 30\n[world]\nclusters = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.method.theta, 30.0);
        assert_eq!(cfg.method.n, 4);
        assert_eq!(cfg.world.clusters, 3);
        assert_eq!(cfg.world.per_cluster, 50);
    }

    #[test]
    fn rejects_out_of_range() {
        let mut cfg = RunConfig::default();
        cfg.method.theta = 150.0;
        assert!(cfg.validate().unwrap_err().is_validation());
        let mut cfg = RunConfig::default();
        cfg.method.n = 1;
        assert!(cfg.validate().is_err());
        cfg.method.ablation = Ablation::SingleCollaborator;
        assert!(cfg.validate().is_ok());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }
}
