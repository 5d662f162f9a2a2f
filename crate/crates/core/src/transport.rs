//! HTTP plumbing shared by the chat and embedding clients.
//!
//! Clients talk to an [`HttpTransport`] rather than to `reqwest` directly so
//! that recorded transcripts and scripted failures can stand in for a live
//! endpoint.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("request to {url} failed: {message}")]
    Connect { url: String, message: String },
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("no recorded exchange matches request to {url}")]
    NoRecording { url: String },
}

/// Errors surfaced after the retry policy has run its course.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("transport failure after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

/// Blocking `reqwest` transport.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self
            .client
            .post(url)
            .timeout(timeout)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = bearer {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout { url: url.to_string() }
            } else {
                TransportError::Connect {
                    url: url.to_string(),
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Connect {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        Ok(HttpResponse { status, body })
    }
}

/// One captured request/response pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub url: String,
    pub request: serde_json::Value,
    pub status: u16,
    pub response: serde_json::Value,
}

/// Replays captured exchanges, matching on URL and request body.
pub struct ReplayTransport {
    exchanges: Vec<RecordedExchange>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<RecordedExchange>) -> Self {
        Self { exchanges }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }
}

impl HttpTransport for ReplayTransport {
    fn post_json(
        &self,
        url: &str,
        _bearer: Option<&str>,
        body: &str,
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let request: serde_json::Value =
            serde_json::from_str(body).map_err(|_| TransportError::NoRecording { url: url.to_string() })?;
        self.exchanges
            .iter()
            .find(|x| x.url == url && x.request == request)
            .map(|x| HttpResponse {
                status: x.status,
                body: match &x.response {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                },
            })
            .ok_or_else(|| TransportError::NoRecording { url: url.to_string() })
    }
}

/// Returns queued outcomes in order; used to script failures.
#[derive(Default)]
pub struct ScriptedTransport {
    outcomes: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
    calls: Mutex<Vec<String>>,
}

impl ScriptedTransport {
    pub fn new(outcomes: Vec<Result<HttpResponse, TransportError>>) -> Self {
        Self {
            outcomes: Mutex::new(outcomes.into()),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Request bodies seen so far.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("calls lock").clone()
    }
}

impl HttpTransport for ScriptedTransport {
    fn post_json(
        &self,
        url: &str,
        _bearer: Option<&str>,
        body: &str,
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        self.calls.lock().expect("calls lock").push(body.to_string());
        self.outcomes
            .lock()
            .expect("outcomes lock")
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::NoRecording { url: url.to_string() }))
    }
}

/// Something that can wait; swapped out in tests to avoid real sleeps.
pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without sleeping.
#[derive(Default)]
pub struct RecordingSleeper {
    pub delays: Mutex<Vec<Duration>>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().expect("delays lock").push(d);
    }
}

/// Exponential backoff: `base * factor^attempt`, plus up to `jitter` of that delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let jitter = if self.jitter > 0.0 {
            rand::rng().random_range(0.0..=self.jitter) * nominal
        } else {
            0.0
        };
        Duration::from_secs_f64(nominal + jitter)
    }
}

/// POSTs `body`, retrying transport failures and 429s per `policy`.
pub fn post_with_retry(
    transport: &dyn HttpTransport,
    sleeper: &dyn Sleeper,
    policy: &RetryPolicy,
    url: &str,
    bearer: Option<&str>,
    body: &str,
    timeout: Duration,
) -> Result<String, RequestError> {
    let mut attempt = 0u32;
    loop {
        let last = match transport.post_json(url, bearer, body, timeout) {
            Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
            Ok(resp) if resp.status == 429 => format!("status 429: {}", resp.body),
            Ok(resp) => {
                return Err(RequestError::Status {
                    status: resp.status,
                    body: resp.body,
                })
            }
            Err(e) => e.to_string(),
        };
        if attempt >= policy.max_retries {
            return Err(RequestError::Exhausted {
                attempts: attempt + 1,
                last,
            });
        }
        sleeper.sleep(policy.delay(attempt));
        attempt += 1;
    }
}
