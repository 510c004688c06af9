//! Outbound JSON-over-HTTP plumbing shared by the remote embedding,
//! rerank, chat and judge clients.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result, TransportError};

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> Result<Value, TransportError>;
}

/// Blocking reqwest transport. The client is built on first use so that
/// construction is safe from inside an async runtime.
pub struct HttpTransport {
    timeout: Duration,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            timeout,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("failed to build HTTP client")
        })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> Result<Value, TransportError> {
        let mut req = self.client().post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError {
            message: format!("POST {url}: {e}"),
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
            status: None,
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError {
                message: format!("POST {url}: HTTP {status}: {}", truncate(&text, 300)),
                retryable: status.is_server_error() || status.as_u16() == 429,
                status: Some(status.as_u16()),
            });
        }
        resp.json::<Value>().map_err(|e| TransportError {
            message: format!("POST {url}: invalid JSON response: {e}"),
            retryable: false,
            status: Some(status.as_u16()),
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 200,
        }
    }
}

impl RetryPolicy {
    /// Runs `call` until it succeeds, fails fatally, or the retry budget is spent.
    /// Backoff doubles after every failed attempt.
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, TransportError>) -> Result<T> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable && attempts <= self.max_retries => {
                    log::debug!("attempt {attempts} failed: {e}; retrying");
                    let wait = self.backoff_ms.saturating_mul(1 << (attempts - 1).min(10));
                    if wait > 0 {
                        thread::sleep(Duration::from_millis(wait));
                    }
                }
                Err(source) => return Err(Error::Transport { attempts, source }),
            }
        }
    }
}

/// Base URL plus the name of the environment variable holding the API key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: None,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (self.base_url.starts_with("http://") || self.base_url.starts_with("https://"))
            && self
                .base_url
                .split("://")
                .nth(1)
                .is_some_and(|h| !h.is_empty() && !h.starts_with('/'));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "malformed endpoint URL `{}`",
                self.base_url
            )))
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    use super::*;

    /// Replays scripted responses and records every request.
    pub struct ScriptedTransport {
        pub responses: Mutex<Vec<Result<Value, TransportError>>>,
        pub calls: AtomicU32,
        pub requests: Mutex<Vec<(String, Value)>>,
    }

    impl ScriptedTransport {
        pub fn new(mut responses: Vec<Result<Value, TransportError>>) -> Self {
            responses.reverse();
            Self {
                responses: Mutex::new(responses),
                calls: AtomicU32::new(0),
                requests: Mutex::new(Vec::new()),
            }
        }

        pub fn calls(&self) -> u32 {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl Transport for ScriptedTransport {
        fn post_json(
            &self,
            url: &str,
            body: &Value,
            _bearer: Option<&str>,
        ) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.requests
                .lock()
                .unwrap()
                .push((url.to_string(), body.clone()));
            self.responses
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err(TransportError::retryable("timeout")))
        }
    }
}
