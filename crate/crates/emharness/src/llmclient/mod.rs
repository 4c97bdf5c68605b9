//! Chat-completion backends with response caching, batching, and retries.
//!
//! Every backend implements [`ChatBackend`]: a synchronous request in,
//! completion text plus token usage out. [`ScriptedBackend`] replays canned
//! responses for offline runs and tests, [`HostedBackend`] speaks the common
//! chat-completions HTTP shape, and [`CachingClient`] wraps any backend with
//! an append-only response cache so repeated experiments are free and
//! reproducible. [`run_batch`] drives a whole request list with bounded
//! parallelism, optional rate limiting, and exponential backoff on transient
//! failures.

mod batch;
mod cache;
mod hosted;
mod scripted;

pub use batch::{run_batch, BatchOptions, RetryPolicy};
pub use cache::{cache_key, CachingClient};
pub use hosted::{HostedBackend, API_KEY_ENV};
pub use scripted::{ScriptEntry, ScriptMatcher, ScriptOutcome, ScriptedBackend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::RenderedConversation;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("authentication rejected with status {status}")]
    Auth { status: u16 },
    #[error("rate limited by backend")]
    RateLimited,
    #[error("backend server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("backend rejected request with status {status}: {message}")]
    Http { status: u16, message: String },
    #[error("transport failure: {message}")]
    Transport { message: String },
    #[error("malformed backend response: {message}")]
    InvalidResponse { message: String },
    #[error("no script entry matches the prompt: {preview:?}")]
    ScriptMiss { preview: String },
    #[error("invalid backend script: {message}")]
    BadScript { message: String },
    #[error("api key not found: set {env_var}")]
    MissingApiKey { env_var: String },
    #[error("response cache corrupted at line {line}, rebuild the cache file: {message}")]
    CacheCorrupted { line: usize, message: String },
    #[error("scripted failure: {message}")]
    Scripted { message: String, transient: bool },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    /// Transient failures are worth retrying; everything else is permanent.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ClientError::RateLimited
                | ClientError::Server { .. }
                | ClientError::Transport { .. }
                | ClientError::Scripted {
                    transient: true,
                    ..
                }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        TokenUsage {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn combined(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub conversation: RenderedConversation,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl CompletionRequest {
    /// Request with the experiment defaults: temperature 0, no output cap.
    pub fn new(model_id: impl Into<String>, conversation: RenderedConversation) -> Self {
        CompletionRequest {
            model_id: model_id.into(),
            conversation,
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_secs: f64,
    pub backend: String,
    /// True when the result was served from the response cache.
    pub cached: bool,
}

/// A synchronous chat-completion backend.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ClientError>;
}

/// Whitespace token count used when a script entry does not specify usage.
pub(crate) fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
