use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionParams};
use crate::io::{self, IoError};
use crate::prompt::ContentHash;

/// Computes a response from the prompt text, or `None` to fall through.
pub type Responder = Arc<dyn Fn(&str, &CompletionParams) -> Option<String> + Send + Sync>;

/// One line of a scripted response table. Every present matcher must match;
/// a rule with no matchers matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<ContentHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_prefix: Option<String>,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub fail: bool,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ScriptRule {
    pub fn hash(hash: ContentHash, response: impl Into<String>) -> Self {
        Self {
            hash: Some(hash),
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            contains: Some(needle.into()),
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn key_prefix(prefix: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            key_prefix: Some(prefix.into()),
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn failing(mut self) -> Self {
        self.fail = true;
        self
    }

    fn matches(&self, prompt: &str, hash: ContentHash, params: &CompletionParams) -> bool {
        self.hash.is_none_or(|h| h == hash)
            && self.contains.as_deref().is_none_or(|c| prompt.contains(c))
            && self
                .key_prefix
                .as_deref()
                .is_none_or(|p| params.idempotency_key.starts_with(p))
    }
}

/// Deterministic test double: table rules first, then the responder, then the default.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    responder: Option<Responder>,
    default_response: Option<String>,
    latency: Duration,
    failure: Option<(f64, Mutex<ChaCha8Rng>)>,
    concurrent_safe: bool,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("id", &self.id)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            rules: Vec::new(),
            responder: None,
            default_response: None,
            latency: Duration::ZERO,
            failure: None,
            concurrent_safe: true,
        }
    }

    /// Loads rules from a JSONL table.
    pub fn from_jsonl(id: impl Into<String>, path: &Path) -> Result<Self, IoError> {
        let rules: Vec<ScriptRule> = io::read_jsonl(path)?;
        Ok(Self::new(id).with_rules(rules))
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_rules(mut self, rules: impl IntoIterator<Item = ScriptRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    pub fn with_responder(mut self, responder: Responder) -> Self {
        self.responder = Some(responder);
        self
    }

    pub fn with_default_response(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Fails each call independently with probability `rate`, drawn from a seeded stream.
    pub fn with_failure_rate(mut self, rate: f64, seed: u64) -> Self {
        self.failure = Some((rate, Mutex::new(ChaCha8Rng::seed_from_u64(seed))));
        self
    }

    pub fn not_concurrent(mut self) -> Self {
        self.concurrent_safe = false;
        self
    }
}

#[async_trait]
impl CompletionBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent_safe
    }

    async fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError> {
        let hash = ContentHash::of(prompt);
        let rule = self.rules.iter().find(|r| r.matches(prompt, hash, params));
        let latency = self.latency + Duration::from_millis(rule.map_or(0, |r| r.latency_ms));
        if !latency.is_zero() {
            tokio::time::sleep(latency).await;
        }
        if let Some((rate, rng)) = &self.failure {
            if rng.lock().expect("rng lock").random::<f64>() < *rate {
                return Err(BackendError::Failed("injected failure".into()));
            }
        }
        if let Some(rule) = rule {
            return if rule.fail {
                Err(BackendError::Failed("scripted failure".into()))
            } else {
                Ok(rule.response.clone())
            };
        }
        if let Some(text) = self.responder.as_ref().and_then(|r| r(prompt, params)) {
            return Ok(text);
        }
        self.default_response
            .clone()
            .ok_or_else(|| BackendError::Failed(format!("no scripted response for prompt {}", hash.to_hex())))
    }
}
