use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate id(s): {}", .0.join(", "))]
    DuplicateId(Vec<String>),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("template error: {0}")]
    Template(String),

    /// Connection-level failure; retried by the HTTP client before surfacing.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Error payload returned by the model service. Never retried.
    #[error("provider error ({status}): {message}")]
    Provider { status: u16, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("backend lacks capability: {0}")]
    Capability(String),

    #[error("fine-tune failed: {0}")]
    FineTune(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("pipeline state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the class of errors caused by bad input or configuration
    /// rather than by a backend or the filesystem.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::DuplicateId(_)
                | Error::Precondition(_)
                | Error::Template(_)
                | Error::Config(_)
                | Error::State(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Precondition(_) => "precondition",
            Error::Template(_) => "template",
            Error::Transport { .. } => "transport",
            Error::Provider { .. } => "provider",
            Error::Protocol(_) => "protocol",
            Error::Capability(_) => "capability",
            Error::FineTune(_) => "fine_tune",
            Error::Simulation(_) => "simulation",
            Error::State(_) => "state",
            Error::Config(_) => "config",
        }
    }
}
