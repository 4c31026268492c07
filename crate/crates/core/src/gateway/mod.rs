//! Completion backends behind a rate-limited, retrying dispatch layer.
//!
//! [`Gateway::dispatch`] admits at most `queue_capacity` outstanding requests
//! and answers every other caller with [`DispatchOutcome::Busy`] immediately.
//! Admitted requests take a token-bucket token and an in-flight permit per
//! backend attempt, retry on failure with the configured backoff, and end as
//! either a completion or [`DispatchOutcome::Degraded`].

mod http;
mod limiter;
mod scripted;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::prompt::PromptText;

pub use http::HttpChatBackend;
pub use limiter::TokenBucket;
pub use scripted::{Responder, ScriptRule, ScriptedBackend};

/// Per-call parameters handed to a backend alongside the prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend call timed out")]
    Timeout,
    #[error("backend error: {0}")]
    Failed(String),
}

/// A model server. Backends that cannot take concurrent calls report it via
/// [`CompletionBackend::concurrent_safe`] and the gateway serializes them.
#[async_trait]
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    fn concurrent_safe(&self) -> bool {
        true
    }

    async fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: PromptText,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_s: f64,
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequestError {
    #[error("timeout_s must be positive")]
    Timeout,
    #[error("max_tokens must be positive")]
    MaxTokens,
    #[error("temperature must be a non-negative number")]
    Temperature,
}

impl CompletionRequest {
    pub fn new(prompt: PromptText, idempotency_key: impl Into<String>) -> Self {
        Self {
            prompt,
            max_tokens: 512,
            temperature: 0.0,
            timeout_s: 30.0,
            idempotency_key: idempotency_key.into(),
        }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(RequestError::Timeout);
        }
        if self.max_tokens == 0 {
            return Err(RequestError::MaxTokens);
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(RequestError::Temperature);
        }
        Ok(())
    }

    fn params(&self) -> CompletionParams {
        CompletionParams {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            idempotency_key: self.idempotency_key.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub elapsed_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub rate_limit_per_s: f64,
    pub burst: u32,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub retry_backoff_ms: Vec<u64>,
    pub queue_capacity: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            rate_limit_per_s: 20.0,
            burst: 40,
            max_in_flight: 32,
            retry_limit: 2,
            retry_backoff_ms: vec![250, 1000],
            queue_capacity: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("gateway setting {0} must be positive")]
    NotPositive(&'static str),
    #[error("retry_backoff_ms has {have} entries, retry_limit {need} needs at least that many")]
    ShortBackoff { have: usize, need: u32 },
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate_limit_per_s > 0.0 && self.rate_limit_per_s.is_finite()) {
            return Err(ConfigError::NotPositive("rate_limit_per_s"));
        }
        if self.burst == 0 {
            return Err(ConfigError::NotPositive("burst"));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::NotPositive("max_in_flight"));
        }
        if self.queue_capacity == 0 {
            return Err(ConfigError::NotPositive("queue_capacity"));
        }
        if self.retry_backoff_ms.len() < self.retry_limit as usize {
            return Err(ConfigError::ShortBackoff {
                have: self.retry_backoff_ms.len(),
                need: self.retry_limit,
            });
        }
        Ok(())
    }

    /// Effectively unthrottled settings for offline tools and tests.
    pub fn unthrottled() -> Self {
        Self {
            rate_limit_per_s: 1e9,
            burst: u32::MAX,
            max_in_flight: 64,
            retry_limit: 2,
            retry_backoff_ms: vec![0, 0],
            queue_capacity: 1 << 20,
        }
    }
}

/// Terminal failure of [`complete`], with the number of attempts made.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error} after {attempts} attempt(s)")]
pub struct CompletionError {
    pub error: BackendError,
    pub attempts: u32,
}

/// Calls `backend` with timeout and retries, without admission control or rate limiting.
pub async fn complete(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
    retry_limit: u32,
    backoff_ms: &[u64],
) -> Result<CompletionResult, CompletionError> {
    run_attempts(backend, request, retry_limit, backoff_ms, None).await
}

struct Limits<'a> {
    bucket: &'a TokenBucket,
    in_flight: &'a Semaphore,
    stats: &'a StatsInner,
}

async fn run_attempts(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
    retry_limit: u32,
    backoff_ms: &[u64],
    limits: Option<Limits<'_>>,
) -> Result<CompletionResult, CompletionError> {
    let started = Instant::now();
    let params = request.params();
    let timeout = Duration::from_secs_f64(request.timeout_s);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let outcome = match &limits {
            Some(limits) => {
                limits.bucket.acquire().await;
                let _permit = limits.in_flight.acquire().await.expect("semaphore never closed");
                limits.stats.enter_backend();
                let r = tokio::time::timeout(timeout, backend.complete(&request.prompt.text, &params)).await;
                limits.stats.leave_backend();
                r
            }
            None => tokio::time::timeout(timeout, backend.complete(&request.prompt.text, &params)).await,
        };
        let error = match outcome {
            Ok(Ok(text)) => {
                return Ok(CompletionResult {
                    text,
                    backend_id: backend.id().to_string(),
                    elapsed_ms: started.elapsed().as_millis() as u64,
                    attempts,
                })
            }
            Ok(Err(e)) => e,
            Err(_) => BackendError::Timeout,
        };
        if attempts > retry_limit {
            return Err(CompletionError { error, attempts });
        }
        tracing::debug!(attempt = attempts, %error, "retrying backend call");
        let delay = backoff_ms.get(attempts as usize - 1).copied().unwrap_or(0);
        if delay > 0 {
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchOutcome {
    Completed(CompletionResult),
    /// Queue full; the request was not admitted.
    Busy,
    /// Admitted, but every attempt failed.
    Degraded {
        attempts: u32,
        error: BackendError,
    },
}

#[derive(Debug, Default)]
struct StatsInner {
    admitted: AtomicU64,
    busy: AtomicU64,
    completed: AtomicU64,
    degraded: AtomicU64,
    backend_calls: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl StatsInner {
    fn enter_backend(&self) {
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    }

    fn leave_backend(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Counters since the gateway was created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub admitted: u64,
    pub busy: u64,
    pub completed: u64,
    pub degraded: u64,
    pub backend_calls: u64,
    pub peak_in_flight: usize,
}

/// Shared, internally synchronized dispatcher. Clone the `Arc`, not the gateway.
pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
    config: GatewayConfig,
    admission: Arc<Semaphore>,
    in_flight: Semaphore,
    bucket: TokenBucket,
    stats: StatsInner,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>, config: GatewayConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let slots = if backend.concurrent_safe() {
            config.max_in_flight
        } else {
            1
        };
        Ok(Self {
            admission: Arc::new(Semaphore::new(config.queue_capacity)),
            in_flight: Semaphore::new(slots),
            bucket: TokenBucket::new(config.rate_limit_per_s, config.burst),
            stats: StatsInner::default(),
            backend,
            config,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Admitted requests not yet finished.
    pub fn queue_depth(&self) -> usize {
        self.config.queue_capacity - self.admission.available_permits()
    }

    pub fn stats(&self) -> GatewayStats {
        let s = &self.stats;
        GatewayStats {
            admitted: s.admitted.load(Ordering::SeqCst),
            busy: s.busy.load(Ordering::SeqCst),
            completed: s.completed.load(Ordering::SeqCst),
            degraded: s.degraded.load(Ordering::SeqCst),
            backend_calls: s.backend_calls.load(Ordering::SeqCst),
            peak_in_flight: s.peak_in_flight.load(Ordering::SeqCst),
        }
    }

    pub async fn dispatch(&self, request: &CompletionRequest) -> DispatchOutcome {
        let Ok(_ticket) = self.admission.clone().try_acquire_owned() else {
            self.stats.busy.fetch_add(1, Ordering::SeqCst);
            return DispatchOutcome::Busy;
        };
        self.stats.admitted.fetch_add(1, Ordering::SeqCst);
        let limits = Limits {
            bucket: &self.bucket,
            in_flight: &self.in_flight,
            stats: &self.stats,
        };
        match run_attempts(
            self.backend.as_ref(),
            request,
            self.config.retry_limit,
            &self.config.retry_backoff_ms,
            Some(limits),
        )
        .await
        {
            Ok(result) => {
                self.stats.completed.fetch_add(1, Ordering::SeqCst);
                DispatchOutcome::Completed(result)
            }
            Err(CompletionError { error, attempts }) => {
                self.stats.degraded.fetch_add(1, Ordering::SeqCst);
                tracing::warn!(attempts, %error, "request degraded");
                DispatchOutcome::Degraded { attempts, error }
            }
        }
    }
}
