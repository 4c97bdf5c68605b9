//! Hosted backend speaking the common chat-completions HTTP shape.

use std::time::{Duration, Instant};

use super::{ChatBackend, ClientError, CompletionRequest, CompletionResult, TokenUsage};

/// Environment variable holding the bearer token for hosted endpoints.
pub const API_KEY_ENV: &str = "EMHARNESS_API_KEY";

/// POSTs `{model, messages, temperature}` to a chat-completions endpoint and
/// reads `choices[0].message.content` plus token usage back.
pub struct HostedBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HostedBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        HostedBackend {
            endpoint: endpoint.into(),
            api_key,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        }
    }

    /// Build a backend whose key comes from `EMHARNESS_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, ClientError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(endpoint, Some(key))),
            _ => Err(ClientError::MissingApiKey {
                env_var: API_KEY_ENV.to_string(),
            }),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": request.model_id,
            "messages": request.conversation.messages,
            "temperature": request.temperature,
        });
        if let Some(cap) = request.max_output_tokens {
            body["max_tokens"] = serde_json::json!(cap);
        }
        body
    }
}

fn classify_status(status: u16, body: String) -> ClientError {
    match status {
        401 | 403 => ClientError::Auth { status },
        429 => ClientError::RateLimited,
        500..=599 => ClientError::Server {
            status,
            message: truncate(&body),
        },
        _ => ClientError::Http {
            status,
            message: truncate(&body),
        },
    }
}

fn truncate(text: &str) -> String {
    text.chars().take(200).collect()
}

impl ChatBackend for HostedBackend {
    fn id(&self) -> &str {
        "hosted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match call.send_string(&self.body(request).to_string()) {
            Ok(response) => response,
            Err(ureq::Error::Status(status, response)) => {
                let body = response.into_string().unwrap_or_default();
                return Err(classify_status(status, body));
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(ClientError::Transport {
                    message: t.to_string(),
                })
            }
        };
        let value: serde_json::Value =
            response
                .into_json()
                .map_err(|e| ClientError::InvalidResponse {
                    message: e.to_string(),
                })?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ClientError::InvalidResponse {
                message: "missing choices[0].message.content".to_string(),
            })?
            .to_string();
        let usage = TokenUsage::new(
            value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        );
        Ok(CompletionResult {
            text,
            usage,
            latency_secs: started.elapsed().as_secs_f64(),
            backend: "hosted".to_string(),
            cached: false,
        })
    }
}
