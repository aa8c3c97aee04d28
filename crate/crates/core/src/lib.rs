//! Semi-supervised fine-tuning orchestration: warm-up, retrieval-augmented
//! collaborative pseudo-labeling, entropy selection and re-fine-tuning
//! against OpenAI-compatible services or a deterministic simulator.

pub mod backend;
pub mod collab;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod hashing;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod selection;
pub mod simlab;

pub use backend::{
    ChatBackend, ChatMessage, ChatRequest, ChatResponse, Embedder, EmbeddingRequest, FineTuneJob,
    FineTuner, JobStatus, ModelRef, ModelRole, Role, Services, TokenLogprob,
};
pub use collab::{Ablation, InferenceConfig, PseudoResponse, PseudoStatus};
pub use data::{Answer, AnswerKind, Dataset, SplitRatio, TaskOption, TaskRecord};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, SealedGold, Verdict};
pub use retrieval::EmbeddingIndex;
pub use selection::{EntropyScore, SelectionReport, TauSource};
pub use config::RunConfig;
pub use pipeline::{Pipeline, PipelineState, Stage};
