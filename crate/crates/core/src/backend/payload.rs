//! Chat-format fine-tune payload: one `{"messages": [...]}` object per line,
//! ending with the assistant turn that is trained on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub messages: Vec<ChatMessage>,
}

impl TrainingExample {
    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn assistant_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err("no user message".into());
        }
        match self.messages.last() {
            Some(m) if m.role == Role::Assistant && !m.content.is_empty() => Ok(()),
            _ => Err("last message must be a non-empty assistant turn".into()),
        }
    }
}

pub fn to_jsonl(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("training examples serialize"));
        out.push('\n');
    }
    out
}

/// Parse and check a payload, naming the first offending line.
pub fn parse_training_jsonl(text: &str, path: &Path) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("messages").is_none() {
            return Err(err("record is missing \"messages\"".into()));
        }
        let example: TrainingExample =
            serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        example.check().map_err(err)?;
        out.push(example);
    }
    Ok(out)
}

/// Validate a payload file against the chat schema and return its examples.
pub fn validate_training_file(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_training_jsonl(&text, path)
}
