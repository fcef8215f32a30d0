//! Blocking JSON-over-HTTP clients with bounded retries.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::backend::{Backend, ChatRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 200,
            max_delay_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempt counts from 1).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key_env: None,
            timeout_ms: 60_000,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// POSTs JSON and returns the parsed response body, retrying on non-2xx,
/// transport failures and undecodable bodies.
pub struct JsonClient {
    client: reqwest::blocking::Client,
    cfg: HttpConfig,
    api_key: Option<String>,
    gate: Gate,
}

impl JsonClient {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.url.is_empty() {
            return Err(Error::Validation("HTTP backend needs a url".into()));
        }
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Validation(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Validation(format!("cannot build HTTP client: {e}")))?;
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self {
            client,
            cfg,
            api_key,
            gate,
        })
    }

    pub fn post<T>(&self, body: &Value, extract: impl Fn(Value) -> Result<T>) -> Result<T> {
        let _permit = self.gate.acquire();
        let attempts = self.cfg.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.try_once(body).and_then(&extract) {
                Ok(v) => return Ok(v),
                Err(e) => last = e.to_string(),
            }
            if attempt < attempts {
                std::thread::sleep(self.cfg.retry.delay(attempt));
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn try_once(&self, body: &Value) -> Result<Value> {
        let mut req = self.client.post(&self.cfg.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Shape(format!("request failed: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Shape(format!("HTTP {status}")));
        }
        resp.json::<Value>()
            .map_err(|e| Error::Shape(format!("malformed JSON response: {e}")))
    }
}

/// Chat-completion backend: sends `{model, messages, temperature, seed?}` and
/// reads `choices[0].message.content`.
pub struct HttpBackend {
    client: JsonClient,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(cfg)?,
        })
    }
}

fn chat_content(v: Value) -> Result<String> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Shape("response lacks choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        req.validate()?;
        self.client.post(&req.wire_body(), chat_content)
    }
}
