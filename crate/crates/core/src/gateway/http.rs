use async_trait::async_trait;
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionParams};

/// Talks to any server exposing a chat-completions endpoint
/// (`{"model", "messages": [{"role", "content"}], "temperature", "max_tokens"}`).
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpChatBackend {
    /// `url` is the full endpoint, e.g. `http://localhost:11434/v1/chat/completions`.
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            id: format!("http:{model}"),
            url: url.into(),
            model,
            api_key: None,
            client: reqwest::Client::new(),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn request_body(&self, prompt: &str, params: &CompletionParams) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        })
    }
}

#[async_trait]
impl CompletionBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError> {
        let mut req = self
            .client
            .post(&self.url)
            .header("Idempotency-Key", &params.idempotency_key)
            .json(&self.request_body(prompt, params));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Failed(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::Failed(format!("HTTP {status}: {body}")));
        }
        let body: Value = resp.json().await.map_err(|e| BackendError::Failed(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Failed("response has no choices[0].message.content".into()))
    }
}
