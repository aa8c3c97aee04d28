use crate::backend::{check_score_args, ChatBackend, ChatRequest, ChatResponse, TokenLogprob};
use crate::error::{Error, Result};

use super::backend::sim_tokens;

type Reply = dyn Fn(&ChatRequest) -> Result<String> + Send + Sync;

/// Backend with fixed replies and per-token probabilities, for pinning
/// exact numeric behavior in tests.
pub struct ScriptedBackend {
    token_probs: Vec<f64>,
    reply: Box<Reply>,
    echo: bool,
}

impl ScriptedBackend {
    /// Token `i` of any scored or generated text gets probability
    /// `token_probs[i % len]`.
    pub fn new(token_probs: Vec<f64>) -> Result<Self> {
        if token_probs.is_empty() || token_probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Validation("scripted token probabilities must be in (0, 1]".into()));
        }
        Ok(ScriptedBackend {
            token_probs,
            reply: Box::new(|_| Ok("Answer: A".into())),
            echo: true,
        })
    }

    pub fn with_reply(mut self, reply: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        self.reply = Box::new(reply);
        self
    }

    pub fn without_echo(mut self) -> Self {
        self.echo = false;
        self
    }

    fn logprobs(&self, text: &str) -> Vec<TokenLogprob> {
        sim_tokens(text)
            .into_iter()
            .enumerate()
            .map(|(i, token)| TokenLogprob {
                token: token.to_string(),
                logprob: self.token_probs[i % self.token_probs.len()].ln(),
            })
            .collect()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let text = (self.reply)(req)?;
        Ok(ChatResponse {
            token_logprobs: req.want_logprobs.then(|| self.logprobs(&text)),
            text,
            finish_reason: "stop".into(),
        })
    }

    fn score_completion(&self, _model: &str, _prompt: &str, completion: &str) -> Result<Vec<TokenLogprob>> {
        check_score_args(completion)?;
        if !self.echo {
            return Err(Error::Capability("scripted backend has echo-scoring disabled".into()));
        }
        Ok(self.logprobs(completion))
    }

    fn supports_echo_scoring(&self) -> bool {
        self.echo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_logprobs_are_logs_of_the_script() {
        let b = ScriptedBackend::new(vec![1.0]).unwrap();
        assert!(b.score_completion("m", "p", "Answer: B").unwrap().iter().all(|t| t.logprob == 0.0));
        let b = ScriptedBackend::new(vec![0.5, 0.25]).unwrap();
        let lp: Vec<f64> = b.score_completion("m", "p", "Answer: B").unwrap().iter().map(|t| t.logprob).collect();
        assert_eq!(lp, [0.5f64.ln(), 0.25f64.ln()]);
        assert!(b.score_completion("m", "p", "").is_err());
    }
}
