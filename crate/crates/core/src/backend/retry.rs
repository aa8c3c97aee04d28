use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounded exponential backoff for transport-level failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Outcome of one attempt, as seen by the retry loop.
pub(crate) enum Attempt<T> {
    Done(T),
    Retryable(String),
    Fatal(Error),
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            attempts: 1,
            initial_backoff: Duration::ZERO,
        }
    }

    pub(crate) fn run<T>(&self, mut op: impl FnMut() -> Attempt<T>) -> Result<T> {
        let attempts = self.attempts.max(1);
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match op() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(msg) => {
                    log::warn!("attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_then_surfaces_transport_error() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let res: Result<()> = policy.run(|| {
            calls.set(calls.get() + 1);
            Attempt::Retryable("refused".into())
        });
        assert_eq!(calls.get(), 3);
        assert!(matches!(res, Err(Error::Transport { attempts: 3, .. })));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let calls = Cell::new(0);
        let res: Result<()> = RetryPolicy::default().run(|| {
            calls.set(calls.get() + 1);
            Attempt::Fatal(Error::Provider {
                status: 400,
                message: "bad".into(),
            })
        });
        assert_eq!(calls.get(), 1);
        assert!(matches!(res, Err(Error::Provider { .. })));
    }

    #[test]
    fn recovers_after_transient_failure() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        let res = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Attempt::Retryable("reset".into())
            } else {
                Attempt::Done(42)
            }
        });
        assert_eq!(res.unwrap(), 42);
    }
}
