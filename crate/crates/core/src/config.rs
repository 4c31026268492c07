//! `key = value` configuration with environment overrides.
//!
//! Any key can be overridden by an environment variable named with the
//! [`ENV_PREFIX`] followed by the upper-cased key, e.g. `JITFB_LOG_PATH`.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::assets;
use crate::classifier::{BaselineError, ClassificationStrategy, LexicalBackend, RequestSettings, StrategyMode};
use crate::domain::{FewShotExample, QuizProblem};
use crate::gateway::{self, CompletionBackend, GatewayConfig, HttpChatBackend, ScriptedBackend};
use crate::io::{parse_key_values, read_json, read_jsonl, read_to_string, IoError};

pub const ENV_PREFIX: &str = "JITFB_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("{key} = {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{0} is required")]
    Missing(&'static str),
    #[error(transparent)]
    Gateway(#[from] gateway::ConfigError),
    #[error("quiz {id}: {reason}")]
    Quiz { id: String, reason: String },
    #[error("bank: {0}")]
    Bank(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// Typed access to a parsed key=value map that remembers which keys were read.
#[derive(Debug)]
pub struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(Self::new(parse_key_values(text)?))
    }

    /// Applies overrides such as `JITFB_BIND=...` from `vars`.
    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                self.map.insert(key.to_ascii_lowercase(), v);
            }
        }
        self
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).filter(|v| !v.is_empty())
    }

    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: v,
                reason: e.to_string(),
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(v) = self.map.remove(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    /// Offline nearest-example classifier over the few-shot bank.
    Lexical,
    /// Matcher table loaded from JSONL.
    Scripted,
    /// Chat-completions HTTP server.
    Http,
    /// Reads hidden labels back out of simulator essays.
    Sim,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lexical" => Ok(Self::Lexical),
            "scripted" => Ok(Self::Scripted),
            "http" => Ok(Self::Http),
            "sim" => Ok(Self::Sim),
            other => Err(format!("expected lexical, scripted, http or sim, got {other:?}")),
        }
    }
}

fn parse_mode(s: &str) -> Result<StrategyMode, String> {
    match s {
        "zero_shot" | "zero-shot" => Ok(StrategyMode::ZeroShot),
        "few_shot" | "few-shot" => Ok(StrategyMode::FewShot),
        other => Err(format!("expected zero_shot or few_shot, got {other:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: String,
    pub log_path: PathBuf,
    /// JSON array of quizzes; the bundled quiz when absent.
    pub quiz_path: Option<PathBuf>,
    /// JSONL few-shot bank; the bundled bank when absent.
    pub bank_path: Option<PathBuf>,
    pub admin_token: Option<String>,
    pub anonymization_key: String,
    pub id_nonce: String,
    pub backend: BackendKind,
    pub scripted_table: Option<PathBuf>,
    pub http_url: Option<String>,
    pub http_model: Option<String>,
    pub http_api_key: Option<String>,
    pub strategy: ClassificationStrategy,
    pub request: RequestSettings,
    pub gateway: GatewayConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            log_path: PathBuf::from("events.jsonl"),
            quiz_path: None,
            bank_path: None,
            admin_token: None,
            anonymization_key: "change-me".into(),
            id_nonce: "default".into(),
            backend: BackendKind::Lexical,
            scripted_table: None,
            http_url: None,
            http_model: None,
            http_api_key: None,
            strategy: ClassificationStrategy::default(),
            request: RequestSettings::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

impl ServeConfig {
    pub fn from_fields(mut f: Fields) -> Result<Self, ConfigError> {
        let d = Self::default();
        let mode = match f.take_str("strategy") {
            Some(s) => parse_mode(&s).map_err(|reason| ConfigError::BadValue {
                key: "strategy".into(),
                value: s,
                reason,
            })?,
            None => d.strategy.mode,
        };
        let default_k = match mode {
            StrategyMode::ZeroShot => 0,
            StrategyMode::FewShot => d.strategy.k_per_label,
        };
        let strategy = ClassificationStrategy {
            mode,
            k_per_label: f.take_or("k_per_label", default_k)?,
            use_secondary: f.take_or("use_secondary", d.strategy.use_secondary)?,
        };
        strategy.validate().map_err(|e| ConfigError::BadValue {
            key: "strategy".into(),
            value: format!("{mode:?}"),
            reason: e.to_string(),
        })?;
        let gateway = GatewayConfig {
            rate_limit_per_s: f.take_or("rate_limit_per_s", d.gateway.rate_limit_per_s)?,
            burst: f.take_or("burst", d.gateway.burst)?,
            max_in_flight: f.take_or("max_in_flight", d.gateway.max_in_flight)?,
            retry_limit: f.take_or("retry_limit", d.gateway.retry_limit)?,
            retry_backoff_ms: f.take_list("retry_backoff_ms")?.unwrap_or(d.gateway.retry_backoff_ms),
            queue_capacity: f.take_or("queue_capacity", d.gateway.queue_capacity)?,
        };
        gateway.validate()?;
        let cfg = Self {
            bind: f.take_str("bind").unwrap_or(d.bind),
            log_path: f.take_str("log_path").map(PathBuf::from).unwrap_or(d.log_path),
            quiz_path: f.take_str("quiz_path").map(PathBuf::from),
            bank_path: f.take_str("bank_path").map(PathBuf::from),
            admin_token: f.take_str("admin_token"),
            anonymization_key: f.take_str("anonymization_key").unwrap_or(d.anonymization_key),
            id_nonce: f.take_str("id_nonce").unwrap_or(d.id_nonce),
            backend: f.take_or("backend", d.backend)?,
            scripted_table: f.take_str("scripted_table").map(PathBuf::from),
            http_url: f.take_str("http_url"),
            http_model: f.take_str("http_model"),
            http_api_key: f.take_str("http_api_key"),
            strategy,
            request: RequestSettings {
                max_tokens: f.take_or("max_tokens", d.request.max_tokens)?,
                temperature: f.take_or("temperature", d.request.temperature)?,
                timeout_s: f.take_or("timeout_s", d.request.timeout_s)?,
            },
            gateway,
        };
        f.finish()?;
        match cfg.backend {
            BackendKind::Scripted if cfg.scripted_table.is_none() => {
                return Err(ConfigError::Missing("scripted_table"))
            }
            BackendKind::Http if cfg.http_url.is_none() => return Err(ConfigError::Missing("http_url")),
            BackendKind::Http if cfg.http_model.is_none() => return Err(ConfigError::Missing("http_model")),
            _ => {}
        }
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies environment overrides from `vars`.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => read_to_string(p)?,
            None => String::new(),
        };
        Self::from_fields(Fields::parse(&text)?.with_env(vars))
    }

    pub fn quizzes(&self) -> Result<Vec<QuizProblem>, ConfigError> {
        let quizzes: Vec<QuizProblem> = match &self.quiz_path {
            Some(p) => read_json(p)?,
            None => assets::sample_quizzes(),
        };
        for q in &quizzes {
            q.validate().map_err(|e| ConfigError::Quiz {
                id: q.quiz_id.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(quizzes)
    }

    pub fn bank(&self) -> Result<Vec<FewShotExample>, ConfigError> {
        let bank: Vec<FewShotExample> = match &self.bank_path {
            Some(p) => read_jsonl(p)?,
            None => assets::sample_bank(),
        };
        if let Some(i) = bank.iter().position(|e| !e.is_well_formed()) {
            return Err(ConfigError::Bank(format!("example {} is malformed", i + 1)));
        }
        Ok(bank)
    }

    pub fn backend(&self, bank: &[FewShotExample]) -> Result<Arc<dyn CompletionBackend>, ConfigError> {
        Ok(match self.backend {
            BackendKind::Lexical => Arc::new(LexicalBackend::new(bank)?),
            BackendKind::Scripted => {
                let path = self
                    .scripted_table
                    .as_ref()
                    .ok_or(ConfigError::Missing("scripted_table"))?;
                Arc::new(ScriptedBackend::from_jsonl("scripted", path)?)
            }
            BackendKind::Http => {
                let url = self.http_url.as_ref().ok_or(ConfigError::Missing("http_url"))?;
                let model = self.http_model.as_ref().ok_or(ConfigError::Missing("http_model"))?;
                let mut b = HttpChatBackend::new(url, model);
                if let Some(key) = &self.http_api_key {
                    b = b.with_api_key(key);
                }
                Arc::new(b)
            }
            BackendKind::Sim => Arc::new(crate::sim::sim_backend()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    const DOCUMENTED: &str = "\
bind = 127.0.0.1:8080\n\
log_path = events.jsonl\n\
admin_token = change-me\n\
anonymization_key = a-long-random-secret\n\
\n\
# lexical | scripted | sim | http\n\
backend = http\n\
http_url = http://localhost:11434/v1/chat/completions\n\
http_model = llama3\n\
# zero_shot | few_shot\n\
strategy = few_shot\n\
k_per_label = 3\n\
use_secondary = true\n\
\n\
rate_limit_per_s = 5\n\
burst = 10\n\
max_in_flight = 8\n\
queue_capacity = 64\n\
retry_limit = 2\n\
retry_backoff_ms = 250, 1000\n\
timeout_s = 30\n\
";

    #[test]
    fn documented_example_parses() {
        let c = ServeConfig::from_fields(Fields::parse(DOCUMENTED).unwrap()).unwrap();
        assert_eq!(c.backend, BackendKind::Http);
        assert_eq!(c.http_model.as_deref(), Some("llama3"));
        assert_eq!(c.gateway.retry_backoff_ms, vec![250, 1000]);
        assert_eq!(c.gateway.max_in_flight, 8);
    }

    #[test]
    fn defaults_match_gateway_defaults() {
        let c = ServeConfig::from_fields(Fields::parse("").unwrap()).unwrap();
        assert_eq!(c.gateway, GatewayConfig::default());
        assert_eq!(c.strategy, ClassificationStrategy::few_shot(3, true));
        assert_eq!(c.backend, BackendKind::Lexical);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text =
            "# service\nbind = 0.0.0.0:9000\nmax_in_flight = 8\nretry_backoff_ms = 100, 400\nstrategy = zero_shot\n";
        let f = Fields::parse(text).unwrap().with_env(env(&[
            ("JITFB_BIND", "127.0.0.1:1"),
            ("JITFB_ADMIN_TOKEN", "t"),
            ("OTHER_X", "1"),
        ]));
        let c = ServeConfig::from_fields(f).unwrap();
        assert_eq!(c.bind, "127.0.0.1:1");
        assert_eq!(c.admin_token.as_deref(), Some("t"));
        assert_eq!(c.gateway.max_in_flight, 8);
        assert_eq!(c.gateway.retry_backoff_ms, vec![100, 400]);
        assert_eq!(c.strategy, ClassificationStrategy::zero_shot(true));
    }

    #[test]
    fn rejects_bad_input() {
        let err = |t: &str| ServeConfig::from_fields(Fields::parse(t).unwrap()).unwrap_err();
        assert!(matches!(err("colour = blue"), ConfigError::UnknownKey(k) if k == "colour"));
        assert!(matches!(err("burst = many"), ConfigError::BadValue { .. }));
        assert!(matches!(
            err("backend = scripted"),
            ConfigError::Missing("scripted_table")
        ));
        assert!(matches!(err("max_in_flight = 0"), ConfigError::Gateway(_)));
        assert!(matches!(err("retry_limit = 3"), ConfigError::Gateway(_)));
        assert!(matches!(
            err("strategy = few_shot\nk_per_label = 0"),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn bundled_assets_load() {
        let c = ServeConfig::default();
        assert_eq!(c.quizzes().unwrap().len(), 1);
        let bank = c.bank().unwrap();
        assert!(c.backend(&bank).is_ok());
    }
}
