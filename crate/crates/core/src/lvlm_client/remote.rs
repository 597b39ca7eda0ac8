use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{ClientError, LvlmBackend, TransportError};
use crate::prompting::{MultimodalPrompt, Segment};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// OpenAI-compatible chat-completions transport. The prompt becomes a single
/// user message whose content parts mirror the prompt segments; images are
/// sent inline as base64 data URLs.
pub struct RemoteBackend {
    model_id: String,
    endpoint: String,
    api_key: String,
    max_tokens: u32,
    http: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(model_id: impl Into<String>, endpoint: impl Into<String>, api_key: impl Into<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ClientError::BackendFailure(e.to_string()))?;
        Ok(Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            max_tokens: 300,
            http,
        })
    }

    /// Reads the API key from `env_var`.
    pub fn from_env(model_id: impl Into<String>, endpoint: impl Into<String>, env_var: &str) -> Result<Self, ClientError> {
        let key = std::env::var(env_var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| ClientError::AuthError(format!("environment variable {env_var} is not set")))?;
        Self::new(model_id, endpoint, key)
    }

    pub fn request_body(&self, prompt: &MultimodalPrompt, temperature: f64) -> Value {
        let content: Vec<Value> = prompt
            .segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => json!({"type": "text", "text": t}),
                Segment::Image(img) => {
                    let mime = image::guess_format(img.bytes())
                        .map(|f| f.to_mime_type())
                        .unwrap_or("image/jpeg");
                    let data = base64::engine::general_purpose::STANDARD.encode(img.bytes());
                    json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}})
                }
            })
            .collect();
        json!({
            "model": self.model_id,
            "temperature": temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

pub(crate) fn extract_content(body: &Value) -> Result<String, TransportError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TransportError::Fatal(format!("unexpected response payload: {body}")))
}

fn classify_status(status: u16, body: &str) -> TransportError {
    match status {
        401 | 403 => TransportError::Auth(format!("HTTP {status}")),
        408 | 409 | 429 | 500..=599 => TransportError::Transient(format!("HTTP {status}: {body}")),
        _ => TransportError::Fatal(format!("HTTP {status}: {body}")),
    }
}

impl LvlmBackend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &MultimodalPrompt, temperature: f64, timeout: Duration) -> Result<String, TransportError> {
        let response = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(&self.request_body(prompt, temperature))
            .send()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| TransportError::Transient(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| TransportError::Fatal(e.to_string()))?;
        extract_content(&body)
    }
}
