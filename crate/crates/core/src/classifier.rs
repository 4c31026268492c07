//! Error-type classification strategies and the evaluation harness.

use std::collections::HashMap;
use std::fmt::Write as _;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_essay, ErrorLabel, FeedbackResponse, FewShotExample, QuizProblem, ValidatedEssay, ValidationError,
};
use crate::gateway::{BackendError, CompletionBackend, CompletionParams, CompletionRequest, DispatchOutcome, Gateway};
use crate::prompt::{
    build_jit_prompt, extract_student_essay, parse_jit_response, render_jit_response, LabelMode, PromptError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationStrategy {
    pub mode: StrategyMode,
    pub k_per_label: usize,
    pub use_secondary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("zero-shot strategy must use k_per_label = 0")]
    ZeroShotWithExamples,
    #[error("few-shot strategy needs k_per_label >= 1")]
    FewShotWithoutExamples,
}

impl ClassificationStrategy {
    pub fn zero_shot(use_secondary: bool) -> Self {
        Self {
            mode: StrategyMode::ZeroShot,
            k_per_label: 0,
            use_secondary,
        }
    }

    pub fn few_shot(k_per_label: usize, use_secondary: bool) -> Self {
        Self {
            mode: StrategyMode::FewShot,
            k_per_label,
            use_secondary,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        match (self.mode, self.k_per_label) {
            (StrategyMode::ZeroShot, 0) => Ok(()),
            (StrategyMode::ZeroShot, _) => Err(StrategyError::ZeroShotWithExamples),
            (StrategyMode::FewShot, 0) => Err(StrategyError::FewShotWithoutExamples),
            (StrategyMode::FewShot, _) => Ok(()),
        }
    }

    pub fn label_mode(&self) -> LabelMode {
        if self.use_secondary {
            LabelMode::WithSecondary
        } else {
            LabelMode::PrimaryOnly
        }
    }

    /// Row name in the results table, e.g. "Few-shot LLM w/ Secondary".
    pub fn display_name(&self) -> String {
        let base = match self.mode {
            StrategyMode::ZeroShot => "Zero-shot LLM",
            StrategyMode::FewShot => "Few-shot LLM",
        };
        if self.use_secondary {
            format!("{base} w/ Secondary")
        } else {
            base.to_string()
        }
    }
}

impl Default for ClassificationStrategy {
    fn default() -> Self {
        Self::few_shot(3, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("gateway busy")]
    Busy,
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub const FALLBACK_FEEDBACK: &str = "Before you answer, reread your strategy and check two things. \
Which object are you analyzing, and does its mass belong in your result? Which way does each force you use point, \
and does your essay say so? Make both choices explicit, then compare your plan with the question.";

/// Returned whenever the model cannot be reached or keeps producing unusable output.
/// It flags both concepts so an essay is never waved through as correct by default.
pub fn fallback_response() -> FeedbackResponse {
    FeedbackResponse {
        classification: ErrorLabel::PositionDirection,
        confidence: 1,
        secondary_classification: ErrorLabel::PositionDirection,
        feedback: FALLBACK_FEEDBACK.to_string(),
        degraded: true,
    }
}

/// Request settings shared by every classification call.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestSettings {
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_s: f64,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            timeout_s: 30.0,
        }
    }
}

/// Classifies one essay through the gateway.
///
/// Only [`ClassifyError::Busy`] and configuration errors surface. Backend
/// failures and output that still fails to parse after one re-ask yield
/// [`fallback_response`].
pub async fn classify(
    essay: &ValidatedEssay,
    problem: &QuizProblem,
    bank: &[FewShotExample],
    strategy: &ClassificationStrategy,
    gateway: &Gateway,
    settings: &RequestSettings,
    idempotency_key: &str,
) -> Result<FeedbackResponse, ClassifyError> {
    strategy.validate()?;
    let prompt = build_jit_prompt(problem, essay, bank, strategy.k_per_label, strategy.label_mode())?;
    let mut request = CompletionRequest::new(prompt, idempotency_key);
    request.max_tokens = settings.max_tokens;
    request.temperature = settings.temperature;
    request.timeout_s = settings.timeout_s;

    for ask in 0..2 {
        if ask == 1 {
            request.idempotency_key = format!("{idempotency_key}#reask");
        }
        match gateway.dispatch(&request).await {
            DispatchOutcome::Busy if ask == 0 => return Err(ClassifyError::Busy),
            DispatchOutcome::Busy | DispatchOutcome::Degraded { .. } => return Ok(fallback_response()),
            DispatchOutcome::Completed(result) => match parse_jit_response(&result.text) {
                Ok(response) => return Ok(response),
                Err(e) => tracing::warn!(ask, error = %e, "unparseable model output"),
            },
        }
    }
    Ok(fallback_response())
}

fn tokenize(text: &str) -> HashMap<String, f64> {
    let mut counts = HashMap::new();
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    for token in cleaned.split_whitespace() {
        *counts.entry(token.to_lowercase()).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        counts.values_mut().for_each(|v| *v /= norm);
    }
    counts
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().filter_map(|(k, v)| large.get(k).map(|w| v * w)).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BaselineError {
    #[error("few-shot bank is empty")]
    EmptyBank,
}

/// Nearest bank example by cosine similarity of normalized term frequencies.
/// Ties go to the earliest label in enum order.
pub fn classify_lexical_baseline(essay: &ValidatedEssay, bank: &[FewShotExample]) -> Result<ErrorLabel, BaselineError> {
    LexicalBaseline::new(bank)?.classify(essay.text())
}

/// Bank vectors precomputed once for repeated baseline classification.
#[derive(Debug, Clone)]
pub struct LexicalBaseline {
    vectors: Vec<(ErrorLabel, HashMap<String, f64>)>,
    feedback: Vec<String>,
}

impl LexicalBaseline {
    pub fn new(bank: &[FewShotExample]) -> Result<Self, BaselineError> {
        if bank.is_empty() {
            return Err(BaselineError::EmptyBank);
        }
        Ok(Self {
            vectors: bank.iter().map(|e| (e.label, tokenize(&e.essay_text))).collect(),
            feedback: bank.iter().map(|e| e.expert_feedback.clone()).collect(),
        })
    }

    /// Best cosine per label, with the index of the bank example achieving it.
    fn best_per_label(&self, text: &str) -> [Option<(f64, usize)>; 4] {
        let v = tokenize(text);
        let mut best: [Option<(f64, usize)>; 4] = [None; 4];
        for (i, (label, bv)) in self.vectors.iter().enumerate() {
            let s = cosine(&v, bv);
            let slot = &mut best[label.index()];
            if slot.is_none_or(|(b, _)| s > b) {
                *slot = Some((s, i));
            }
        }
        best
    }

    /// Labels present in the bank, best first. Ties keep enum order.
    pub fn ranked(&self, text: &str) -> Vec<(ErrorLabel, f64)> {
        let best = self.best_per_label(text);
        let mut ranked: Vec<(ErrorLabel, f64)> = ErrorLabel::ALL
            .into_iter()
            .filter_map(|l| best[l.index()].map(|(s, _)| (l, s)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked
    }

    pub fn classify(&self, text: &str) -> Result<ErrorLabel, BaselineError> {
        self.ranked(text)
            .first()
            .map(|(l, _)| *l)
            .ok_or(BaselineError::EmptyBank)
    }

    /// Full response: nearest label, runner-up as secondary, and the expert
    /// feedback of the nearest example.
    pub fn respond(&self, text: &str) -> Result<FeedbackResponse, BaselineError> {
        let ranked = self.ranked(text);
        let (label, score) = *ranked.first().ok_or(BaselineError::EmptyBank)?;
        let secondary = ranked.get(1).map_or(label, |(l, _)| *l);
        let runner_up = ranked.get(1).map_or(0.0, |(_, s)| *s);
        let margin = score - runner_up;
        let confidence = match margin {
            m if m >= 0.2 => 5,
            m if m >= 0.1 => 4,
            m if m >= 0.05 => 3,
            m if m > 0.0 => 2,
            _ => 1,
        };
        let idx = self.best_per_label(text)[label.index()].map(|(_, i)| i).unwrap_or(0);
        Ok(FeedbackResponse {
            classification: label,
            confidence,
            secondary_classification: secondary,
            feedback: self.feedback[idx].clone(),
            degraded: false,
        })
    }
}

/// Offline model stand-in: classifies the essay embedded in a feedback prompt
/// with [`LexicalBaseline`] and answers in the model's JSON format.
#[derive(Debug, Clone)]
pub struct LexicalBackend {
    baseline: LexicalBaseline,
}

impl LexicalBackend {
    pub fn new(bank: &[FewShotExample]) -> Result<Self, BaselineError> {
        Ok(Self {
            baseline: LexicalBaseline::new(bank)?,
        })
    }
}

#[async_trait::async_trait]
impl CompletionBackend for LexicalBackend {
    fn id(&self) -> &str {
        "lexical"
    }

    async fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, BackendError> {
        let essay = extract_student_essay(prompt)
            .ok_or_else(|| BackendError::Failed("prompt has no student essay section".into()))?;
        let response = self
            .baseline
            .respond(essay)
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(render_jit_response(&response))
    }
}

/// Counts indexed `[gold][predicted]` in label enum order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn record(&mut self, gold: ErrorLabel, predicted: ErrorLabel) {
        self.counts[gold.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..4 {
            for p in 0..4 {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Per-class F1 with the 0/0 = 0 convention.
    pub fn per_class_f1(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (c, slot) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..4).map(|g| self.counts[g][c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            *slot = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        out
    }
}

/// Unweighted mean of the four per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    cm.per_class_f1().iter().sum::<f64>() / 4.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    #[serde(rename = "essay")]
    pub essay_text: String,
    #[serde(rename = "label")]
    pub gold_label: ErrorLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("dataset item {index}: {error}")]
    InvalidItem { index: usize, error: ValidationError },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl LabeledDataset {
    pub fn new(items: Vec<LabeledItem>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        Ok(Self { items })
    }

    pub fn validated(&self) -> Result<Vec<(ValidatedEssay, ErrorLabel)>, EvalError> {
        self.items
            .iter()
            .enumerate()
            .map(|(index, item)| {
                validate_essay(&item.essay_text, 0)
                    .map(|e| (e, item.gold_label))
                    .map_err(|error| EvalError::InvalidItem { index, error })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_mean: f64,
    pub accuracy_halfrange: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_halfrange: f64,
    pub trials: usize,
    pub per_trial_confusions: Vec<ConfusionMatrix>,
}

fn mean_halfrange(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    // identical trials report their shared value, free of summation rounding
    let mean = if max == min {
        min
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    (mean, (max - min) / 2.0)
}

impl EvalReport {
    pub fn from_confusions(per_trial_confusions: Vec<ConfusionMatrix>) -> Self {
        let acc: Vec<f64> = per_trial_confusions.iter().map(ConfusionMatrix::accuracy).collect();
        let f1: Vec<f64> = per_trial_confusions.iter().map(macro_f1).collect();
        let (accuracy_mean, accuracy_halfrange) = mean_halfrange(&acc);
        let (macro_f1_mean, macro_f1_halfrange) = mean_halfrange(&f1);
        Self {
            accuracy_mean,
            accuracy_halfrange,
            macro_f1_mean,
            macro_f1_halfrange,
            trials: per_trial_confusions.len(),
            per_trial_confusions,
        }
    }
}

/// Runs `trials` passes of [`classify`] over the dataset. Calls fan out up to
/// the gateway's in-flight bound (capped by its queue capacity).
pub async fn evaluate(
    dataset: &LabeledDataset,
    problem: &QuizProblem,
    strategy: &ClassificationStrategy,
    bank: &[FewShotExample],
    gateway: &Gateway,
    settings: &RequestSettings,
    trials: usize,
) -> Result<EvalReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    if dataset.items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    strategy.validate().map_err(ClassifyError::from)?;
    let items = dataset.validated()?;
    let parallel = gateway
        .config()
        .max_in_flight
        .min(gateway.config().queue_capacity)
        .max(1);

    let mut confusions = Vec::with_capacity(trials);
    for trial in 0..trials {
        let results: Vec<Result<(ErrorLabel, ErrorLabel), ClassifyError>> = stream::iter(items.iter().enumerate())
            .map(|(i, (essay, gold))| async move {
                let key = format!("eval-t{trial}-i{i}");
                classify(essay, problem, bank, strategy, gateway, settings, &key)
                    .await
                    .map(|r| (*gold, r.classification))
            })
            .buffer_unordered(parallel)
            .collect()
            .await;
        let mut cm = ConfusionMatrix::default();
        for r in results {
            let (gold, predicted) = r?;
            cm.record(gold, predicted);
        }
        confusions.push(cm);
    }
    Ok(EvalReport::from_confusions(confusions))
}

/// Single-trial evaluation of [`LexicalBaseline`].
pub fn evaluate_baseline(dataset: &LabeledDataset, bank: &[FewShotExample]) -> Result<EvalReport, EvalError> {
    let baseline = LexicalBaseline::new(bank)?;
    let mut cm = ConfusionMatrix::default();
    for (essay, gold) in dataset.validated()? {
        cm.record(gold, baseline.classify(essay.text())?);
    }
    Ok(EvalReport::from_confusions(vec![cm]))
}

/// Aligned plain-text table: method, accuracy and macro F1 as percentages with
/// the half-range (as a fraction) after a `±`.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let header = ("Method", "Accuracy", "Macro F1");
    let cells: Vec<(String, String, String)> = rows
        .iter()
        .map(|(name, r)| {
            (
                name.clone(),
                format!("{:.2} ±{:.3}", r.accuracy_mean * 100.0, r.accuracy_halfrange),
                format!("{:.2} ±{:.3}", r.macro_f1_mean * 100.0, r.macro_f1_halfrange),
            )
        })
        .collect();
    let w0 = cells
        .iter()
        .map(|c| c.0.chars().count())
        .max()
        .unwrap_or(0)
        .max(header.0.len());
    let w1 = cells
        .iter()
        .map(|c| c.1.chars().count())
        .max()
        .unwrap_or(0)
        .max(header.1.len());
    let w2 = cells
        .iter()
        .map(|c| c.2.chars().count())
        .max()
        .unwrap_or(0)
        .max(header.2.len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", header.0, header.1, header.2);
    let _ = writeln!(out, "{}", "-".repeat(w0 + w1 + w2 + 4));
    for (a, b, c) in cells {
        let pad1 = w1 - b.chars().count();
        let pad2 = w2 - c.chars().count();
        let _ = writeln!(out, "{:<w0$}  {}{}  {}{}", a, " ".repeat(pad1), b, " ".repeat(pad2), c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{sample_bank, sample_quiz};
    use crate::gateway::{GatewayConfig, ScriptRule, ScriptedBackend};
    use std::sync::Arc;

    fn gateway(backend: ScriptedBackend) -> Gateway {
        Gateway::new(Arc::new(backend), GatewayConfig::unthrottled()).unwrap()
    }

    #[tokio::test]
    async fn lexical_backend_recovers_bank_labels() {
        let bank = sample_bank();
        let gw = Gateway::new(
            Arc::new(LexicalBackend::new(&bank).unwrap()),
            GatewayConfig::unthrottled(),
        )
        .unwrap();
        let strategy = ClassificationStrategy::zero_shot(true);
        for (i, ex) in bank.iter().enumerate() {
            let r = classify(
                &essay(i),
                &sample_quiz(),
                &bank,
                &strategy,
                &gw,
                &RequestSettings::default(),
                "k",
            )
            .await
            .unwrap();
            assert_eq!(r.classification, ex.label);
            assert_eq!(r.feedback, ex.expert_feedback);
            assert!(!r.degraded);
        }
    }

    fn essay(i: usize) -> ValidatedEssay {
        validate_essay(&sample_bank()[i].essay_text, 0).unwrap()
    }

    fn respond(label: ErrorLabel, secondary: ErrorLabel, feedback: &str) -> String {
        render_jit_response(&FeedbackResponse {
            classification: label,
            confidence: 4,
            secondary_classification: secondary,
            feedback: feedback.into(),
            degraded: false,
        })
    }

    #[tokio::test]
    async fn scripted_classification() {
        let fb = "Your plan is sound, but your essay never says which way the force on the bottom block points. State the direction explicitly.";
        let gw = gateway(ScriptedBackend::new("s").with_default_response(respond(
            ErrorLabel::Correct,
            ErrorLabel::Direction,
            fb,
        )));
        let r = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::default(),
            &gw,
            &Default::default(),
            "k",
        )
        .await
        .unwrap();
        assert_eq!(r.classification, ErrorLabel::Correct);
        assert_eq!(r.secondary_classification, ErrorLabel::Direction);
        assert!(r.feedback.contains("which way"));
        assert!(!r.degraded);
    }

    #[tokio::test]
    async fn degraded_gateway_gives_conservative_fallback() {
        let gw = gateway(ScriptedBackend::new("s").with_rule(ScriptRule::contains("", "").failing()));
        let r = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::default(),
            &gw,
            &Default::default(),
            "k",
        )
        .await
        .unwrap();
        assert!(r.degraded);
        assert_eq!(r.classification, ErrorLabel::PositionDirection);
        assert_eq!(r, fallback_response());
    }

    #[tokio::test]
    async fn malformed_twice_falls_back_after_one_reask() {
        let gw = gateway(ScriptedBackend::new("s").with_default_response("I think it is direction."));
        let r = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::default(),
            &gw,
            &Default::default(),
            "k",
        )
        .await
        .unwrap();
        assert!(r.degraded);
        assert_eq!(gw.stats().backend_calls, 2);
    }

    #[tokio::test]
    async fn reask_recovers() {
        let good = respond(ErrorLabel::Position, ErrorLabel::Position, "Which block?");
        let gw = gateway(
            ScriptedBackend::new("s")
                .with_rule(ScriptRule::key_prefix("k#reask", good))
                .with_default_response("{not json"),
        );
        let r = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::default(),
            &gw,
            &Default::default(),
            "k",
        )
        .await
        .unwrap();
        assert!(!r.degraded);
        assert_eq!(r.classification, ErrorLabel::Position);
    }

    #[tokio::test]
    async fn busy_propagates() {
        let cfg = GatewayConfig {
            queue_capacity: 1,
            ..GatewayConfig::unthrottled()
        };
        let backend = ScriptedBackend::new("s")
            .with_default_response("x")
            .with_latency(std::time::Duration::from_secs(3600));
        let gw = Arc::new(Gateway::new(Arc::new(backend), cfg).unwrap());
        let g2 = gw.clone();
        let parked = tokio::spawn(async move {
            let e = essay(0);
            classify(
                &e,
                &sample_quiz(),
                &sample_bank(),
                &ClassificationStrategy::default(),
                &g2,
                &Default::default(),
                "a",
            )
            .await
        });
        while gw.queue_depth() == 0 {
            tokio::task::yield_now().await;
        }
        let r = classify(
            &essay(1),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::default(),
            &gw,
            &Default::default(),
            "b",
        )
        .await;
        assert_eq!(r, Err(ClassifyError::Busy));
        parked.abort();
    }

    #[tokio::test]
    async fn secondary_flag_changes_prompt_only() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let reply = respond(ErrorLabel::Direction, ErrorLabel::Correct, "Check the pair.");
        let backend = ScriptedBackend::new("s").with_responder(Arc::new(move |p: &str, _: &CompletionParams| {
            seen2.lock().unwrap().push(p.to_string());
            Some(reply.clone())
        }));
        let gw = gateway(backend);
        let a = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::few_shot(3, true),
            &gw,
            &Default::default(),
            "a",
        )
        .await
        .unwrap();
        let b = classify(
            &essay(0),
            &sample_quiz(),
            &sample_bank(),
            &ClassificationStrategy::few_shot(3, false),
            &gw,
            &Default::default(),
            "b",
        )
        .await
        .unwrap();
        assert_eq!(a, b);
        let prompts = seen.lock().unwrap();
        assert_ne!(prompts[0], prompts[1]);
    }

    #[test]
    fn strategy_invariants() {
        assert!(ClassificationStrategy::zero_shot(true).validate().is_ok());
        let bad = ClassificationStrategy {
            mode: StrategyMode::ZeroShot,
            k_per_label: 2,
            use_secondary: false,
        };
        assert_eq!(bad.validate(), Err(StrategyError::ZeroShotWithExamples));
        assert_eq!(
            ClassificationStrategy::few_shot(3, true).display_name(),
            "Few-shot LLM w/ Secondary"
        );
    }

    #[test]
    fn baseline_self_similarity_and_tie_break() {
        let bank = sample_bank();
        for (i, ex) in bank.iter().enumerate() {
            assert_eq!(classify_lexical_baseline(&essay(i), &bank).unwrap(), ex.label);
        }
        // every bank essay uses words like "the"; a disjoint vocabulary gives all-zero similarity
        let text = vec!["zzz"; 50].join(" ");
        let e = validate_essay(&text, 0).unwrap();
        let reordered: Vec<_> = bank.iter().rev().cloned().collect();
        assert_eq!(classify_lexical_baseline(&e, &reordered).unwrap(), ErrorLabel::Correct);
        let no_correct: Vec<_> = reordered
            .into_iter()
            .filter(|x| x.label != ErrorLabel::Correct)
            .collect();
        assert_eq!(
            classify_lexical_baseline(&e, &no_correct).unwrap(),
            ErrorLabel::Direction
        );
        assert_eq!(classify_lexical_baseline(&e, &[]), Err(BaselineError::EmptyBank));
    }

    /// Brute-force cosine over a toy bank, computed independently of `tokenize`.
    #[test]
    fn baseline_matches_hand_cosines() {
        let ex = |essay: &str, label| FewShotExample {
            essay_text: essay.into(),
            label,
            expert_feedback: "f".into(),
        };
        let bank = vec![
            ex("push push block", ErrorLabel::Correct),
            ex("block left left", ErrorLabel::Direction),
            ex("top mass", ErrorLabel::Position),
        ];
        let query = format!("{} left block", vec!["pad"; 48].join(" "));
        // query vector: pad=48, left=1, block=1; |q| = sqrt(2306)
        let q = (48f64 * 48.0 + 2.0).sqrt();
        let c0 = 1.0 / (q * 5f64.sqrt()); // (push 2, block 1)
        let c1 = (1.0 + 2.0) / (q * 5f64.sqrt()); // (block 1, left 2)
        let c2 = 0.0;
        assert!(c1 > c0 && c0 > c2);
        let e = validate_essay(&query, 0).unwrap();
        assert_eq!(classify_lexical_baseline(&e, &bank).unwrap(), ErrorLabel::Direction);
    }

    fn cm_from(pairs: &[(ErrorLabel, ErrorLabel, u64)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for &(g, p, n) in pairs {
            cm.counts[g.index()][p.index()] += n;
        }
        cm
    }

    #[test]
    fn macro_f1_cases() {
        use ErrorLabel::*;
        let diag = cm_from(&[
            (Correct, Correct, 5),
            (Direction, Direction, 5),
            (Position, Position, 5),
            (PositionDirection, PositionDirection, 5),
        ]);
        assert_eq!(macro_f1(&diag), 1.0);

        let all_correct = cm_from(&[
            (Correct, Correct, 10),
            (Direction, Correct, 10),
            (Position, Correct, 10),
            (PositionDirection, Correct, 10),
        ]);
        let f1 = all_correct.per_class_f1();
        assert!((f1[0] - 0.4).abs() < 1e-15);
        assert_eq!(&f1[1..], &[0.0, 0.0, 0.0]);
        assert!((macro_f1(&all_correct) - 0.1).abs() < 1e-15);
        assert_eq!(all_correct.accuracy(), 0.25);

        let one_class = cm_from(&[(Direction, Direction, 7)]);
        assert_eq!(macro_f1(&one_class), 0.25);
    }

    #[test]
    fn halfrange_definition() {
        let a = ConfusionMatrix {
            counts: [[3, 1, 0, 0], [0; 4], [0; 4], [0; 4]],
        };
        let b = ConfusionMatrix {
            counts: [[1, 3, 0, 0], [0; 4], [0; 4], [0; 4]],
        };
        let r = EvalReport::from_confusions(vec![a, b]);
        assert_eq!(r.accuracy_halfrange, (0.75 - 0.25) / 2.0);
        assert_eq!(r.accuracy_mean, 0.5);
        let single = EvalReport::from_confusions(vec![a]);
        assert_eq!(single.accuracy_halfrange, 0.0);
    }

    fn echo_backend() -> ScriptedBackend {
        let gold: HashMap<String, ErrorLabel> = sample_bank().into_iter().map(|e| (e.essay_text, e.label)).collect();
        ScriptedBackend::new("echo").with_responder(Arc::new(move |p: &str, _: &CompletionParams| {
            let label = *gold.get(extract_student_essay(p)?)?;
            Some(respond(label, label, "Keep going."))
        }))
    }

    fn dataset() -> LabeledDataset {
        LabeledDataset::new(
            sample_bank()
                .into_iter()
                .map(|e| LabeledItem {
                    essay_text: e.essay_text,
                    gold_label: e.label,
                })
                .collect(),
        )
        .unwrap()
    }

    #[tokio::test]
    async fn evaluate_with_echo_backend() {
        let gw = gateway(echo_backend());
        let r = evaluate(
            &dataset(),
            &sample_quiz(),
            &ClassificationStrategy::default(),
            &sample_bank(),
            &gw,
            &Default::default(),
            2,
        )
        .await
        .unwrap();
        assert_eq!(
            (r.accuracy_mean, r.macro_f1_mean, r.accuracy_halfrange),
            (1.0, 1.0, 0.0)
        );
        assert_eq!(r.per_trial_confusions.len(), 2);
    }

    #[tokio::test]
    async fn evaluate_two_trials_with_different_tables() {
        let all_correct = respond(ErrorLabel::Correct, ErrorLabel::Correct, "ok");
        let backend = echo_backend().with_rule(ScriptRule::key_prefix("eval-t1-", all_correct));
        let gw = gateway(backend);
        let r = evaluate(
            &dataset(),
            &sample_quiz(),
            &ClassificationStrategy::default(),
            &sample_bank(),
            &gw,
            &Default::default(),
            2,
        )
        .await
        .unwrap();
        let a1 = r.per_trial_confusions[0].accuracy();
        let a2 = r.per_trial_confusions[1].accuracy();
        assert_eq!((a1, a2), (1.0, 0.25));
        assert_eq!(r.accuracy_halfrange, (a1 - a2).abs() / 2.0);
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_confusions(vec![ConfusionMatrix {
            counts: [[1, 0, 0, 0], [0; 4], [0; 4], [0; 4]],
        }]);
        let t = render_table(&[("Few-shot LLM w/ Secondary".into(), r)]);
        let lines: Vec<_> = t.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[2].contains("100.00 ±0.000"));
        assert_eq!(lines[0].chars().count(), lines[2].chars().count());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
            prop::array::uniform4(prop::array::uniform4(0u64..20)).prop_map(|counts| ConfusionMatrix { counts })
        }

        proptest! {
            #[test]
            fn accuracy_is_trace_over_total(cm in matrix()) {
                prop_assume!(cm.total() > 0);
                prop_assert_eq!(cm.accuracy(), cm.trace() as f64 / cm.total() as f64);
            }

            #[test]
            fn macro_f1_permutation_invariant(cm in matrix(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
                let mut permuted = ConfusionMatrix::default();
                for g in 0..4 {
                    for p in 0..4 {
                        permuted.counts[perm[g]][perm[p]] = cm.counts[g][p];
                    }
                }
                prop_assert!((macro_f1(&cm) - macro_f1(&permuted)).abs() < 1e-12);
            }
        }
    }
}
