//! The LLM backend abstraction and the retrying completion call.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::AgentId;

/// Why a request is being made. Backends may ignore this; the mock uses it
/// to pick rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Mutate,
    Summarize,
    Repair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTags {
    pub purpose: Purpose,
    pub agent: Option<AgentId>,
    pub generation: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub system_instructions: String,
    pub user_payload: String,
    pub max_output_tokens: u32,
    pub tags: RequestTags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("rate limited after {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("server error {status}")]
    ServerError { status: u16 },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        matches!(self, BackendError::RateLimited | BackendError::ServerError { .. })
    }
}

/// One completion endpoint. Implementations must be shareable across the
/// worker pool.
pub trait Backend: Send + Sync {
    /// A single attempt, no retries.
    fn send(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

/// Lets a caller keep a handle on a backend it lends to a run.
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn send(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_backoff: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, base_backoff: Duration::ZERO }
    }
}

/// Sends `request`, retrying rate-limit and server errors with exponential
/// backoff (`base · 2^attempt`). The response metadata gains `retries` and
/// `latency_ms`.
pub fn complete(
    backend: &dyn Backend,
    request: &BackendRequest,
    policy: &RetryPolicy,
) -> Result<BackendResponse, BackendError> {
    let started = Instant::now();
    let mut retries = 0;
    loop {
        match backend.send(request) {
            Ok(mut response) => {
                if response.text.trim().is_empty() {
                    return Err(BackendError::EmptyCompletion);
                }
                response.backend_metadata.insert("retries".into(), retries.into());
                response
                    .backend_metadata
                    .entry("latency_ms".into())
                    .or_insert_with(|| (started.elapsed().as_millis() as u64).into());
                return Ok(response);
            }
            Err(e) if e.is_retryable() && retries < policy.max_retries => {
                let delay = policy.base_backoff.saturating_mul(1u32 << retries.min(16));
                log::debug!("backend {e}; retry {} in {delay:?}", retries + 1);
                std::thread::sleep(delay);
                retries += 1;
            }
            Err(BackendError::RateLimited) => return Err(BackendError::RateLimitedExhausted { attempts: retries + 1 }),
            Err(BackendError::ServerError { status }) => {
                return Err(BackendError::TransportError(format!(
                    "server error {status} after {} attempts",
                    retries + 1
                )))
            }
            Err(e) => return Err(e),
        }
    }
}

/// Rough token count used for budgeting: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}
