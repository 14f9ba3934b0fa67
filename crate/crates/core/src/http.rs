//! Blocking HTTP with bounded retries and exponential backoff.

use std::io::Read;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_attempts: 1,
            ..RetryPolicy::default()
        }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget runs out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts.max(1) => {
                    log::warn!("attempt {attempt} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.max_backoff);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

const MAX_BODY: u64 = 256 << 20;

/// Thin wrapper over a `ureq` agent.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient").field("retry", &self.retry).finish()
    }
}

impl HttpClient {
    pub fn new(user_agent: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent = ureq::AgentBuilder::new()
            .user_agent(user_agent)
            .timeout(timeout)
            .build();
        HttpClient { agent, retry }
    }

    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value> {
        self.retry.run(|| {
            let response = self.agent.post(url).send_json(body).map_err(|e| classify(url, e))?;
            response
                .into_json::<Value>()
                .map_err(|e| Error::Protocol(format!("{url}: response is not JSON: {e}")))
        })
    }

    pub fn get_bytes(&self, url: &str) -> Result<Vec<u8>> {
        self.retry.run(|| {
            let response = self.agent.get(url).call().map_err(|e| classify(url, e))?;
            let mut bytes = Vec::new();
            response
                .into_reader()
                .take(MAX_BODY)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
            Ok(bytes)
        })
    }
}

fn classify(url: &str, err: ureq::Error) -> Error {
    match err {
        ureq::Error::Status(code, _) if code == 429 || code >= 500 => Error::Transport(format!("{url}: HTTP {code}")),
        ureq::Error::Status(code, _) => Error::Protocol(format!("{url}: HTTP {code}")),
        ureq::Error::Transport(t) => Error::Transport(format!("{url}: {t}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn quick(attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: attempts,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(2),
        }
    }

    #[test]
    fn retries_transport_errors_until_budget() {
        let calls = Cell::new(0);
        let out: Result<()> = quick(3).run(|| {
            calls.set(calls.get() + 1);
            Err(Error::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        let calls = Cell::new(0);
        let out: Result<()> = quick(5).run(|| {
            calls.set(calls.get() + 1);
            Err(Error::Protocol("bad".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn succeeds_after_transient_failure() {
        let calls = Cell::new(0);
        let out = quick(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(Error::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let client = HttpClient::new("test", Duration::from_millis(200), RetryPolicy::none());
        let err = client.post_json("http://127.0.0.1:1/x", &Value::Null).unwrap_err();
        assert!(err.is_retryable(), "{err}");
    }
}
