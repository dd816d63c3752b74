//! HTTP text-completion backend.
//!
//! Request body (JSON, POST to the configured URL):
//!
//! ```text
//! { "model", "prompt", "max_tokens", "temperature", "top_p",
//!   "frequency_penalty", "presence_penalty", "best_of", "n": 1, "stop"? }
//! ```
//!
//! where `prompt` is the original prompt followed by the completion text
//! accumulated so far. The response must carry `choices[0].text` and may carry
//! `choices[0].finish_reason` and `usage.completion_tokens`. A finish reason
//! other than `"length"` counts as a natural stop.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, ClientError, RoundOutput, RoundRequest, Source};

pub const API_URL_ENV: &str = "MUTAMARK_API_URL";
pub const API_KEY_ENV: &str = "MUTAMARK_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Total tries per round for retryable failures.
    pub max_tries: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
    pub requests_per_second: f64,
    pub request_timeout: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            model: String::new(),
            max_tries: 3,
            initial_backoff: Duration::from_secs(1),
            max_in_flight: 2,
            requests_per_second: 1.0,
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl LiveConfig {
    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self, ClientError> {
        let url = std::env::var(API_URL_ENV)
            .map_err(|_| ClientError::Backend(format!("{API_URL_ENV} is not set")))?;
        Ok(Self {
            url,
            api_key: std::env::var(API_KEY_ENV).ok(),
            ..Self::default()
        })
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: String,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
    best_of: u32,
    n: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    completion_tokens: Option<usize>,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut count = self.count.lock().expect("in-flight lock");
        while *count >= self.max {
            count = self.freed.wait(count).expect("in-flight lock");
        }
        *count += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Token bucket refilled continuously at `rate` tokens per second.
#[derive(Debug)]
struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    rate: f64,
    burst: f64,
}

impl TokenBucket {
    fn new(rate: f64, burst: f64) -> Self {
        Self {
            state: Mutex::new((burst, Instant::now())),
            rate,
            burst,
        }
    }

    fn take(&self) {
        if self.rate <= 0.0 || !self.rate.is_finite() {
            return;
        }
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate;
                state.0 = (state.0 + refill).min(self.burst);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
pub struct LiveBackend {
    config: LiveConfig,
    http: reqwest::blocking::Client,
    in_flight: InFlight,
    bucket: TokenBucket,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ClientError> {
        if config.url.is_empty() {
            return Err(ClientError::Backend("live backend URL is empty".into()));
        }
        if config.model.is_empty() {
            return Err(ClientError::Backend("no model configured; set `[live] model`".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| ClientError::Backend(e.to_string()))?;
        let max = config.max_in_flight.max(1);
        Ok(Self {
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                max,
            },
            bucket: TokenBucket::new(config.requests_per_second, max as f64),
            config,
            http,
        })
    }

    fn send(&self, body: &CompletionRequest<'_>) -> Result<RoundOutput, Failure> {
        let _slot = self.in_flight.acquire();
        self.bucket.take();
        let mut request = self.http.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Failure::Retryable(format!("transport: {e}")))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| Failure::Fatal(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Failure::Fatal("response has no choices".into()))?;
        let tokens = parsed
            .usage
            .and_then(|u| u.completion_tokens)
            .unwrap_or_else(|| choice.text.split_whitespace().count());
        Ok(RoundOutput {
            finished: choice.finish_reason.as_deref() != Some("length"),
            tokens,
            text: choice.text,
        })
    }
}

impl Backend for LiveBackend {
    fn source(&self) -> Source {
        Source::Live
    }

    fn round(&self, request: RoundRequest<'_>) -> Result<RoundOutput, ClientError> {
        let model = request
            .params
            .model
            .as_deref()
            .unwrap_or(&self.config.model);
        let body = CompletionRequest {
            model,
            prompt: format!("{}{}", request.prompt, request.accumulated),
            max_tokens: request.max_tokens,
            temperature: request.params.temperature,
            top_p: request.params.top_p,
            frequency_penalty: request.params.frequency_penalty,
            presence_penalty: request.params.presence_penalty,
            best_of: request.params.best_of,
            n: 1,
            stop: &request.params.stop_markers,
        };
        let tries = self.config.max_tries.max(1);
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=tries {
            match self.send(&body) {
                Ok(out) => return Ok(out),
                Err(Failure::Fatal(msg)) => return Err(ClientError::Backend(msg)),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("completion request failed (try {attempt}/{tries}): {msg}");
                    last = msg;
                    if attempt < tries {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(ClientError::Backend(format!(
            "giving up after {tries} tries: {last}"
        )))
    }
}
