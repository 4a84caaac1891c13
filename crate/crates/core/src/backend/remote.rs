use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, BackendKind, Provenance, RawMappingText};
use crate::prompting::{SegmentationRequest, SCHEMA_NAME};

/// OpenAI-compatible chat-completions client with a strict JSON-schema
/// `response_format`.
pub struct RemoteBackend {
    client: reqwest::Client,
    config: BackendConfig,
    endpoint: String,
    api_key: String,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig, api_key: String) -> Result<Self, BackendError> {
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::Config("remote backend needs a base URL".into()))?;
        let endpoint = format!("{}/chat/completions", base.trim_end_matches('/'));
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            config,
            endpoint,
            api_key,
        })
    }

    pub fn request_body(&self, request: &SegmentationRequest) -> Value {
        json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": request.messages,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": SCHEMA_NAME,
                    "strict": true,
                    "schema": request.schema,
                }
            }
        })
    }

    async fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = resp
                .headers()
                .get(RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            return Err(BackendError::RateLimited { retry_after });
        }
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("server returned {status}")));
        }
        let text = resp
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                message: text,
            });
        }
        extract_content(&text)
    }
}

/// Pulls `choices[0].message.content`; a populated `refusal` means the model
/// could not satisfy the schema.
fn extract_content(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Transport(format!("unreadable completion body: {e}")))?;
    let message = &v["choices"][0]["message"];
    if let Some(refusal) = message["refusal"].as_str() {
        return Err(BackendError::SchemaRefused(refusal.to_string()));
    }
    if v["choices"][0]["finish_reason"] == "content_filter" {
        return Err(BackendError::SchemaRefused("content filtered".into()));
    }
    message["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| BackendError::Transport("completion has no message content".into()))
}

#[async_trait]
impl Backend for RemoteBackend {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
        let body = self.request_body(request);
        let started = Instant::now();
        let mut retries = 0u32;
        let mut delay = Duration::ZERO;
        loop {
            match self.attempt(&body).await {
                Ok(text) => {
                    return Ok(RawMappingText::new(
                        text,
                        Provenance {
                            backend: BackendKind::Remote,
                            model_name: self.config.model_name.clone(),
                            retry_count: retries,
                            wall_time: started.elapsed(),
                        },
                    ))
                }
                Err(e) if e.is_retryable() => {
                    if retries >= self.config.max_retries {
                        return Err(BackendError::Exhausted {
                            attempts: retries + 1,
                            last: e.to_string(),
                        });
                    }
                    retries += 1;
                    let hint = match e {
                        BackendError::RateLimited { retry_after } => retry_after,
                        _ => None,
                    };
                    delay = self.config.retry.delay(retries, delay, hint);
                    tracing::warn!(error = %e, retry = retries, ?delay, "retrying completion");
                    tokio::time::sleep(delay).await;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
