//! Completion backends and the continuation protocol shared by all of them.
//!
//! A [`Backend`] performs one request/response round. [`ContinuationClient`]
//! drives the multi-round protocol: an initial request of
//! `max_tokens_initial`, then re-submission of prompt plus accumulated
//! completion until a round yields no new tokens, the backend reports a
//! natural stop, or a stop marker appears. At most [`MAX_ROUNDS`] rounds are
//! issued; hitting that bound yields a record flagged `truncated`.

mod cache;
mod live;
mod stub;

pub use cache::{CacheMode, RecordReplayClient};
pub use live::{LiveBackend, LiveConfig, API_KEY_ENV, API_URL_ENV};
pub use stub::{StubBackend, StubRule, StubScript};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_ROUNDS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend error: {0}")]
    Backend(String),
    #[error("replay cache miss for prompt {prompt_hash} (attempt {attempt_index})")]
    CacheMiss {
        prompt_hash: String,
        attempt_index: u32,
    },
    #[error("no stub rule matches prompt {prompt_hash} (attempt {attempt_index})")]
    NoStubRule {
        prompt_hash: String,
        attempt_index: u32,
    },
    #[error("cache i/o: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens_initial: u32,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub best_of: u32,
    pub stop_markers: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model: None,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens_initial: 128,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            best_of: 1,
            stop_markers: Vec::new(),
        }
    }
}

impl GenerationParams {
    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens_initial == 0 || self.best_of == 0 {
            return Err("max_tokens_initial and best_of must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Live,
    Replay,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub params: GenerationParams,
    pub attempt_index: u32,
    pub completion_text: String,
    pub rounds: u32,
    #[serde(default)]
    pub truncated: bool,
    pub source: Source,
}

impl CompletionRecord {
    pub fn cache_key(&self) -> String {
        cache_key(&self.prompt_hash, &self.params, self.attempt_index)
    }
}

/// Content hash of the prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(prompt.as_bytes())))
}

/// Cache key over everything that can influence a completion.
pub fn cache_key(prompt_hash: &str, params: &GenerationParams, attempt_index: u32) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        prompt_hash: &'a str,
        params: &'a GenerationParams,
        attempt_index: u32,
    }
    let json = serde_json::to_vec(&Key {
        prompt_hash,
        params,
        attempt_index,
    })
    .expect("key serializes");
    hex::encode(Sha256::digest(&json))
}

/// One round of a text-completion exchange.
#[derive(Debug, Clone, Copy)]
pub struct RoundRequest<'a> {
    pub prompt: &'a str,
    /// Completion text accumulated by earlier rounds.
    pub accumulated: &'a str,
    pub params: &'a GenerationParams,
    pub max_tokens: u32,
    pub attempt_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutput {
    pub text: String,
    pub tokens: usize,
    /// Backend ended generation on its own rather than at `max_tokens`.
    pub finished: bool,
}

pub trait Backend: Send + Sync {
    fn source(&self) -> Source;
    fn round(&self, request: RoundRequest<'_>) -> Result<RoundOutput, ClientError>;
}

pub trait CompletionClient: Send + Sync {
    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
        attempt_index: u32,
    ) -> Result<CompletionRecord, ClientError>;
}

impl<C: CompletionClient + ?Sized> CompletionClient for Box<C> {
    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
        attempt_index: u32,
    ) -> Result<CompletionRecord, ClientError> {
        (**self).complete(prompt, params, attempt_index)
    }
}

/// Drives a [`Backend`] through the continuation protocol.
#[derive(Debug)]
pub struct ContinuationClient<B> {
    backend: B,
}

impl<B: Backend> ContinuationClient<B> {
    pub fn new(backend: B) -> Self {
        Self { backend }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

impl<B: Backend> CompletionClient for ContinuationClient<B> {
    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
        attempt_index: u32,
    ) -> Result<CompletionRecord, ClientError> {
        if prompt.is_empty() {
            return Err(ClientError::EmptyPrompt);
        }
        let mut accumulated = String::new();
        let mut rounds = 0;
        let mut truncated = true;
        while rounds < MAX_ROUNDS {
            rounds += 1;
            let out = self.backend.round(RoundRequest {
                prompt,
                accumulated: &accumulated,
                params,
                max_tokens: params.max_tokens_initial,
                attempt_index,
            })?;
            accumulated.push_str(&out.text);
            let stopped = params
                .stop_markers
                .iter()
                .any(|m| !m.is_empty() && accumulated.contains(m.as_str()));
            if out.tokens == 0 || out.text.is_empty() || out.finished || stopped {
                truncated = false;
                break;
            }
        }
        if truncated {
            log::warn!(
                "completion for {} hit the {MAX_ROUNDS}-round limit",
                prompt_hash(prompt)
            );
        }
        Ok(CompletionRecord {
            prompt_hash: prompt_hash(prompt),
            params: params.clone(),
            attempt_index,
            completion_text: accumulated,
            rounds,
            truncated,
            source: self.backend.source(),
        })
    }
}
