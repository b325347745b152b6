//! Chat-completions backend over HTTP.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::BackendConfig;

use super::backend::{estimate_tokens, Backend, BackendError, BackendRequest, BackendResponse};

#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct Completion {
    id: Option<String>,
    model: Option<String>,
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in the config.
    /// A missing key is allowed (local servers often need none).
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_s))
            .build()
            .map_err(|e| BackendError::TransportError(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending unauthenticated requests", cfg.api_key_env);
        }
        Ok(Self {
            client,
            url: format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/')),
            model: cfg.model.clone(),
            api_key,
        })
    }
}

impl Backend for HttpBackend {
    fn send(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = json!({
            "model": self.model,
            "max_tokens": request.max_output_tokens,
            "messages": [
                {"role": "system", "content": request.system_instructions},
                {"role": "user", "content": request.user_payload},
            ],
        });
        let started = Instant::now();
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::TransportError(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited);
        }
        if status.is_server_error() {
            return Err(BackendError::ServerError { status: status.as_u16() });
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::TransportError(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let completion: Completion = response.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::TransportError(format!("malformed completion: {e}"))
            }
        })?;
        let text = completion.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        // Servers that omit usage get the same estimate the prompt budget uses.
        let usage = completion.usage.unwrap_or_else(|| Usage {
            prompt_tokens: (estimate_tokens(&request.system_instructions) + estimate_tokens(&request.user_payload)) as u64,
            completion_tokens: estimate_tokens(&text) as u64,
        });
        let mut metadata = BTreeMap::new();
        metadata.insert("model".to_string(), Value::from(completion.model.unwrap_or_else(|| self.model.clone())));
        metadata.insert("latency_ms".to_string(), Value::from(started.elapsed().as_millis() as u64));
        if let Some(id) = completion.id {
            metadata.insert("request_id".to_string(), Value::from(id));
        }
        Ok(BackendResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            backend_metadata: metadata,
        })
    }
}
