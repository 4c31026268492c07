//! Seeded cohort simulator.
//!
//! Each simulated student has a hidden per-turn error label. Essays are
//! synthesized so that their opening sentence identifies that label, and
//! [`sim_responder`] plays the model by reading it back. Driving the service
//! with this pair yields logs whose label dynamics are known exactly.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assets;
use crate::classifier::{ClassificationStrategy, RequestSettings};
use crate::config::{ConfigError, Fields};
use crate::domain::{ErrorLabel, FeedbackResponse, SurveyResponse, MIN_ESSAY_WORDS};
use crate::gateway::{CompletionParams, Gateway, GatewayConfig, Responder, ScriptedBackend};
use crate::prompt::{extract_student_essay, render_jit_response};
use crate::service::{EventLog, ServiceError, ServiceOptions, SessionService};

/// Revision dynamics from the deployment study, rows and columns in label order.
pub const OBSERVED_TRANSITIONS: [[f64; 4]; 4] = [
    [0.6797, 0.1250, 0.1328, 0.0625],
    [0.5278, 0.2917, 0.1250, 0.0556],
    [0.3491, 0.1415, 0.3585, 0.1509],
    [0.3750, 0.0781, 0.2969, 0.2500],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_s: f64,
    /// Uniform extra delay in `[0, jitter_s)`.
    pub jitter_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_students: usize,
    pub initial_label_dist: [f64; 4],
    pub revision_dynamics: [[f64; 4]; 4],
    /// Probability of a second turn after the first.
    pub p_continue_first: f64,
    /// Probability of each further turn.
    pub p_continue: f64,
    pub max_turns: u32,
    pub latency: LatencyModel,
    /// Mean word-count change per (from, to) transition.
    pub word_delta: [[f64; 4]; 4],
    pub seed: u64,
    pub parallelism: usize,
    pub p_survey: f64,
    pub p_helpful: f64,
    pub quiz_id: String,
    pub start_ms: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            initial_label_dist: [0.43, 0.21, 0.2, 0.16],
            revision_dynamics: OBSERVED_TRANSITIONS,
            p_continue_first: 0.2,
            p_continue: 0.435,
            max_turns: 14,
            latency: LatencyModel {
                base_s: 20.0,
                jitter_s: 120.0,
            },
            word_delta: [
                [3.0, 2.0, 2.0, 1.0],
                [12.0, 2.0, 4.0, 2.0],
                [12.0, 4.0, 2.0, 2.0],
                [15.0, 6.0, 6.0, 2.0],
            ],
            seed: 7,
            parallelism: 1,
            p_survey: 0.8,
            p_helpful: 0.7759,
            quiz_id: "stacked-blocks".into(),
            start_ms: 1_700_000_000_000,
        }
    }
}

fn normalize(row: [f64; 4], what: &str) -> Result<[f64; 4], String> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(format!("{what}: probabilities must lie in [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(format!("{what}: probabilities sum to {sum}, not 1"));
    }
    Ok(row.map(|p| p / sum))
}

fn array4<T: Copy + Default>(v: &[T]) -> [T; 4] {
    let mut out = [T::default(); 4];
    out.copy_from_slice(v);
    out
}

impl SimConfig {
    /// Checks ranges and renormalizes rows that sum to one within 1e-3.
    pub fn validated(mut self) -> Result<Self, String> {
        self.initial_label_dist = normalize(self.initial_label_dist, "initial_label_dist")?;
        for (i, row) in self.revision_dynamics.iter_mut().enumerate() {
            *row = normalize(*row, &format!("revision_dynamics row {}", ErrorLabel::ALL[i]))?;
        }
        for (name, p) in [
            ("p_continue_first", self.p_continue_first),
            ("p_continue", self.p_continue),
            ("p_survey", self.p_survey),
            ("p_helpful", self.p_helpful),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        if self.parallelism == 0 {
            return Err("parallelism must be at least 1".into());
        }
        if self.latency.base_s < 0.0 || self.latency.jitter_s < 0.0 {
            return Err("latency must be non-negative".into());
        }
        Ok(self)
    }

    pub fn from_fields(mut f: Fields) -> Result<Self, ConfigError> {
        let d = Self::default();
        let bad = |key: &str, reason: String| ConfigError::BadValue {
            key: key.into(),
            value: String::new(),
            reason,
        };
        let list4 = |f: &mut Fields, key: &str| -> Result<Option<[f64; 4]>, ConfigError> {
            match f.take_list::<f64>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 4 => Ok(Some(array4(&v))),
                Some(v) => Err(bad(key, format!("expected 4 values, got {}", v.len()))),
            }
        };
        let matrix = |f: &mut Fields, key: &str| -> Result<Option<[[f64; 4]; 4]>, ConfigError> {
            match f.take_list::<f64>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 16 => Ok(Some([0, 1, 2, 3].map(|r| array4(&v[r * 4..r * 4 + 4])))),
                Some(v) => Err(bad(key, format!("expected 16 values, got {}", v.len()))),
            }
        };
        let explicit_continue: Option<f64> = f.take("p_continue")?;
        let p_continue = explicit_continue.unwrap_or(d.p_continue);
        let cfg = Self {
            n_students: f.take_or("n_students", d.n_students)?,
            initial_label_dist: list4(&mut f, "initial_label_dist")?.unwrap_or(d.initial_label_dist),
            revision_dynamics: matrix(&mut f, "revision_dynamics")?.unwrap_or(d.revision_dynamics),
            p_continue_first: f
                .take("p_continue_first")?
                .or(explicit_continue)
                .unwrap_or(d.p_continue_first),
            p_continue,
            max_turns: f.take_or("max_turns", d.max_turns)?,
            latency: LatencyModel {
                base_s: f.take_or("latency_base_s", d.latency.base_s)?,
                jitter_s: f.take_or("latency_jitter_s", d.latency.jitter_s)?,
            },
            word_delta: matrix(&mut f, "word_delta")?.unwrap_or(d.word_delta),
            seed: f.take_or("seed", d.seed)?,
            parallelism: f.take_or("parallelism", d.parallelism)?,
            p_survey: f.take_or("p_survey", d.p_survey)?,
            p_helpful: f.take_or("p_helpful", d.p_helpful)?,
            quiz_id: f.take_str("quiz_id").unwrap_or(d.quiz_id),
            start_ms: f.take_or("start_ms", d.start_ms)?,
        };
        f.finish()?;
        cfg.validated().map_err(|reason| bad("sim", reason))
    }
}

// ---------------------------------------------------------------------------
// Essay synthesis

const OPENERS: [[&str; 3]; 4] = [
    [
        "I isolate the top block and say the force on it equals its own small mass times the shared acceleration, pointing opposite to the applied push on the bottom block.",
        "The top block only accelerates because the bottom block pushes it, so that force is the top mass times the acceleration, and the reaction on the bottom block points against the applied force.",
        "My plan uses the top block alone with its own mass and the common acceleration, then flips the direction with the third law so the answer points backward relative to the push.",
    ],
    [
        "I isolate the top block and use its own small mass times the shared acceleration, and the force it exerts points the same way as the applied push.",
        "The top block moves forward with the system, so the force between the blocks is the top mass times the acceleration and it acts forward along the push.",
        "My plan takes the top block with its own mass and the common acceleration, and I keep the direction of that force along the applied push on the bottom block.",
    ],
    [
        "I use the mass of the bottom block times the shared acceleration for the contact force, and the reaction points opposite to the applied push.",
        "The contact force comes from the heavy bottom block, so I multiply the bottom mass by the acceleration and then reverse its direction against the push.",
        "My plan takes the bottom block with its large mass and the common acceleration, and the third law makes the force point backward relative to the push.",
    ],
    [
        "I use the mass of the bottom block times the shared acceleration for the contact force, and it points the same way as the applied push.",
        "The heavy bottom block sets the contact force, so I multiply the bottom mass by the acceleration and keep it forward along the push.",
        "My plan takes the bottom block with its large mass and the common acceleration, and the force simply follows the direction of the applied push.",
    ],
];

const FILLER: [&str; 8] = [
    "Both blocks move together without slipping, so they share one acceleration.",
    "I first find that acceleration from the applied force and the total mass of the pair.",
    "Then I draw a free body diagram for a single block to see which forces act on it.",
    "The table is frictionless, so only the push and the contact force matter horizontally.",
    "Vertical forces cancel because nothing accelerates up or down.",
    "I check that my final expression has the units of a force.",
    "Finally I compare my result with the answer choices before committing.",
    "I write each step in words so the reasoning stays clear.",
];

/// Hidden label encoded in a synthesized essay's opening sentence.
pub fn sim_label_of(essay: &str) -> Option<ErrorLabel> {
    ErrorLabel::ALL
        .into_iter()
        .find(|l| OPENERS[l.index()].iter().any(|o| essay.starts_with(o)))
}

fn words_of(s: &str) -> impl Iterator<Item = &str> {
    s.split_whitespace()
}

/// An essay of exactly `target_words` words (at least the opener) whose first
/// sentence identifies `label`.
pub fn synthesize_essay(label: ErrorLabel, target_words: usize, rng: &mut impl Rng) -> String {
    let opener = OPENERS[label.index()][rng.random_range(0..3)];
    let mut words: Vec<&str> = words_of(opener).collect();
    let start = rng.random_range(0..FILLER.len());
    let mut i = 0;
    while words.len() < target_words {
        words.extend(words_of(FILLER[(start + i) % FILLER.len()]));
        i += 1;
    }
    let keep = target_words.max(words_of(opener).count());
    words.truncate(keep);
    let mut text = words.join(" ");
    while text.ends_with([',', '.']) {
        text.pop();
    }
    text.push('.');
    text
}

fn secondary_for(label: ErrorLabel) -> ErrorLabel {
    match label {
        ErrorLabel::Correct => ErrorLabel::Direction,
        ErrorLabel::Direction => ErrorLabel::PositionDirection,
        ErrorLabel::Position => ErrorLabel::PositionDirection,
        ErrorLabel::PositionDirection => ErrorLabel::Position,
    }
}

const SIM_FEEDBACK: [&str; 4] = [
    "Your plan is complete. Keep naming the object you analyze and the way each force points.",
    "You picked the right object. Now think again about which way the force from the top block acts on the bottom block.",
    "Your directions look careful. Check whose mass belongs in the expression for the force between the blocks.",
    "Reconsider two things: which block's mass sets the contact force, and which way that force points.",
];

/// Model stand-in that reads the hidden label back out of a synthesized essay.
pub fn sim_responder() -> Responder {
    Arc::new(|prompt: &str, _: &CompletionParams| {
        let label = sim_label_of(extract_student_essay(prompt)?)?;
        Some(render_jit_response(&FeedbackResponse {
            classification: label,
            confidence: 4,
            secondary_classification: secondary_for(label),
            feedback: SIM_FEEDBACK[label.index()].to_string(),
            degraded: false,
        }))
    })
}

pub fn sim_backend() -> ScriptedBackend {
    ScriptedBackend::new("sim").with_responder(sim_responder())
}

const SURVEY_REASONS: [&str; 4] = [
    "clarified overlooked aspects",
    "confirmed my approach",
    "pointed me to the right object",
    "too general to act on",
];

// ---------------------------------------------------------------------------
// Driving a service

#[derive(Debug, Error)]
pub enum SimError {
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

pub enum SubmitOutcome {
    Feedback { turn_index: u32, degraded: bool },
    Busy,
}

/// Where simulated students send their requests.
#[async_trait]
pub trait CohortTarget: Send + Sync {
    async fn create_session(&self, student_id: &str, quiz_id: &str, at_ms: i64) -> Result<String, SimError>;
    async fn submit(
        &self,
        session_id: &str,
        essay: &str,
        turn_index: u32,
        at_ms: i64,
    ) -> Result<SubmitOutcome, SimError>;
    async fn answer(&self, session_id: &str, option_key: &str, at_ms: i64) -> Result<bool, SimError>;
    async fn survey(&self, session_id: &str, survey: SurveyResponse, at_ms: i64) -> Result<(), SimError>;
}

/// Calls a [`SessionService`] directly, stamping events with simulated time.
pub struct InProcessTarget {
    pub service: Arc<SessionService>,
}

fn rejected(e: ServiceError) -> SimError {
    SimError::Rejected(e.to_string())
}

#[async_trait]
impl CohortTarget for InProcessTarget {
    async fn create_session(&self, student_id: &str, quiz_id: &str, at_ms: i64) -> Result<String, SimError> {
        Ok(self
            .service
            .create_session_at(student_id, quiz_id, at_ms)
            .await
            .map_err(rejected)?
            .session_id)
    }

    async fn submit(
        &self,
        session_id: &str,
        essay: &str,
        turn_index: u32,
        at_ms: i64,
    ) -> Result<SubmitOutcome, SimError> {
        match self
            .service
            .submit_essay_at(session_id, essay, at_ms, Some(turn_index))
            .await
        {
            Ok(r) => Ok(SubmitOutcome::Feedback {
                turn_index: r.turn_index,
                degraded: r.degraded,
            }),
            Err(ServiceError::Busy) => Ok(SubmitOutcome::Busy),
            Err(e) => Err(rejected(e)),
        }
    }

    async fn answer(&self, session_id: &str, option_key: &str, at_ms: i64) -> Result<bool, SimError> {
        Ok(self
            .service
            .record_answer_at(session_id, option_key, at_ms)
            .await
            .map_err(rejected)?
            .answer_correct)
    }

    async fn survey(&self, session_id: &str, survey: SurveyResponse, at_ms: i64) -> Result<(), SimError> {
        self.service
            .record_survey_at(session_id, survey, at_ms)
            .await
            .map_err(rejected)
    }
}

/// Talks to a running server over its JSON API. The server's clock stamps
/// events. Every student-facing response body is kept for inspection.
pub struct HttpTarget {
    base_url: String,
    client: reqwest::Client,
    bodies: Mutex<Vec<(String, Value)>>,
}

impl HttpTarget {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: reqwest::Client::new(),
            bodies: Mutex::new(Vec::new()),
        }
    }

    /// (route, body) of every response received so far.
    pub fn responses(&self) -> Vec<(String, Value)> {
        self.bodies.lock().expect("bodies lock").clone()
    }

    async fn post(&self, route: &str, path: &str, body: Value) -> Result<(u16, Value), SimError> {
        let resp = self
            .client
            .post(format!("{}{}", self.base_url, path))
            .json(&body)
            .send()
            .await
            .map_err(|e| SimError::ServiceUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let value: Value = resp
            .json()
            .await
            .map_err(|e| SimError::ServiceUnavailable(e.to_string()))?;
        self.bodies
            .lock()
            .expect("bodies lock")
            .push((route.to_string(), value.clone()));
        if status == 429 || (200..300).contains(&status) {
            Ok((status, value))
        } else {
            Err(SimError::Rejected(format!("{route}: {status} {value}")))
        }
    }
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value, SimError> {
    v.get(name)
        .ok_or_else(|| SimError::Rejected(format!("response lacks {name}: {v}")))
}

#[async_trait]
impl CohortTarget for HttpTarget {
    async fn create_session(&self, student_id: &str, quiz_id: &str, _at_ms: i64) -> Result<String, SimError> {
        let (_, v) = self
            .post(
                "create_session",
                "/api/sessions",
                serde_json::json!({"student_id": student_id, "quiz_id": quiz_id}),
            )
            .await?;
        Ok(field(&v, "session_id")?.as_str().unwrap_or_default().to_string())
    }

    async fn submit(
        &self,
        session_id: &str,
        essay: &str,
        turn_index: u32,
        _at_ms: i64,
    ) -> Result<SubmitOutcome, SimError> {
        let (status, v) = self
            .post(
                "feedback",
                &format!("/api/sessions/{session_id}/feedback"),
                serde_json::json!({"essay": essay, "turn_index": turn_index}),
            )
            .await?;
        if status == 429 {
            return Ok(SubmitOutcome::Busy);
        }
        Ok(SubmitOutcome::Feedback {
            turn_index: field(&v, "turn_index")?.as_u64().unwrap_or_default() as u32,
            degraded: field(&v, "degraded")?.as_bool().unwrap_or_default(),
        })
    }

    async fn answer(&self, session_id: &str, option_key: &str, _at_ms: i64) -> Result<bool, SimError> {
        let (_, v) = self
            .post(
                "answer",
                &format!("/api/sessions/{session_id}/answer"),
                serde_json::json!({"option_key": option_key}),
            )
            .await?;
        Ok(field(&v, "answer_correct")?.as_bool().unwrap_or_default())
    }

    async fn survey(&self, session_id: &str, survey: SurveyResponse, _at_ms: i64) -> Result<(), SimError> {
        let body = serde_json::to_value(&survey).expect("survey serializes");
        self.post("survey", &format!("/api/sessions/{session_id}/survey"), body)
            .await
            .map(|_| ())
    }
}

/// Ground truth for one simulated student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTrace {
    pub student_id: String,
    pub session_id: String,
    pub hidden_labels: Vec<ErrorLabel>,
    pub answer_correct: bool,
    pub degraded_turns: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub students: usize,
    pub turns: u64,
    pub degraded_turns: u64,
    pub busy_retries: u64,
    pub traces: Vec<StudentTrace>,
}

/// Attempts per turn before a persistently busy service is reported unavailable.
const MAX_BUSY_RETRIES: u32 = 50;

fn draw(rng: &mut impl Rng, probs: &[f64; 4]) -> ErrorLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for l in ErrorLabel::ALL {
        acc += probs[l.index()];
        if u < acc {
            return l;
        }
    }
    // rounding can leave `acc` a hair below one
    *ErrorLabel::ALL
        .iter()
        .rev()
        .find(|l| probs[l.index()] > 0.0)
        .unwrap_or(&ErrorLabel::Correct)
}

fn student_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

async fn run_student(
    config: &SimConfig,
    target: &dyn CohortTarget,
    index: usize,
    answer_key: &[(ErrorLabel, String)],
) -> Result<(StudentTrace, u64), SimError> {
    let mut rng = student_rng(config.seed, index);
    let student_id = format!("sim-student-{index:06}");
    let mut at_ms = config.start_ms + index as i64 * 1_000;
    let session_id = target.create_session(&student_id, &config.quiz_id, at_ms).await?;

    let mut labels = vec![draw(&mut rng, &config.initial_label_dist)];
    let mut words = MIN_ESSAY_WORDS as f64 + rng.random_range(5.0..25.0);
    let mut degraded_turns = 0;
    let mut busy_retries = 0u64;
    loop {
        let label = *labels.last().expect("at least one label");
        let essay = synthesize_essay(label, words.round() as usize, &mut rng);
        let turn_index = labels.len() as u32;
        let mut tries = 0;
        loop {
            match target.submit(&session_id, &essay, turn_index, at_ms).await? {
                SubmitOutcome::Feedback { degraded, .. } => {
                    degraded_turns += u32::from(degraded);
                    break;
                }
                SubmitOutcome::Busy => {
                    tries += 1;
                    busy_retries += 1;
                    if tries >= MAX_BUSY_RETRIES {
                        return Err(SimError::ServiceUnavailable(format!(
                            "{student_id}: still busy after {tries} tries"
                        )));
                    }
                    tokio::time::sleep(Duration::from_millis(20 * u64::from(tries.min(10)))).await;
                }
            }
        }
        let p = if labels.len() == 1 {
            config.p_continue_first
        } else {
            config.p_continue
        };
        let go_on: f64 = rng.random();
        if labels.len() as u32 >= config.max_turns || go_on >= p {
            break;
        }
        let next = draw(&mut rng, &config.revision_dynamics[label.index()]);
        let delta = config.word_delta[label.index()][next.index()] + rng.random_range(-3.0..3.0);
        words = (words + delta).clamp(MIN_ESSAY_WORDS as f64, 400.0);
        let latency = config.latency.base_s + rng.random::<f64>() * config.latency.jitter_s;
        at_ms += (latency * 1000.0).round() as i64;
        labels.push(next);
    }

    let final_label = *labels.last().expect("at least one label");
    let option = answer_key
        .iter()
        .find(|(l, _)| *l == final_label)
        .map(|(_, k)| k.as_str())
        .ok_or_else(|| SimError::Config(format!("quiz has no option for {final_label}")))?;
    at_ms += 30_000;
    let answer_correct = target.answer(&session_id, option, at_ms).await?;

    if rng.random::<f64>() < config.p_survey {
        let helpful = rng.random::<f64>() < config.p_helpful;
        let reason = if helpful { rng.random_range(0..3) } else { 3 };
        let survey = SurveyResponse {
            helpful,
            reasons: vec![SURVEY_REASONS[reason].to_string()],
            free_text: None,
            cluster_label: Some(reason as i64),
        };
        target.survey(&session_id, survey, at_ms + 10_000).await?;
    }

    Ok((
        StudentTrace {
            student_id,
            session_id,
            hidden_labels: labels,
            answer_correct,
            degraded_turns,
        },
        busy_retries,
    ))
}

/// Runs the cohort against `target`. `answer_key` maps each label to the quiz option
/// carrying it. Per-student randomness depends only on the seed and student index.
pub async fn simulate_cohort(
    config: &SimConfig,
    target: &dyn CohortTarget,
    answer_key: &[(ErrorLabel, String)],
) -> Result<SimSummary, SimError> {
    let config = config.clone().validated().map_err(SimError::Config)?;
    let results: Vec<Result<(StudentTrace, u64), SimError>> = stream::iter(0..config.n_students)
        .map(|i| run_student(&config, target, i, answer_key))
        .buffered(config.parallelism)
        .collect()
        .await;
    let mut summary = SimSummary {
        students: config.n_students,
        ..SimSummary::default()
    };
    for r in results {
        let (trace, busy) = r?;
        summary.turns += trace.hidden_labels.len() as u64;
        summary.degraded_turns += u64::from(trace.degraded_turns);
        summary.busy_retries += busy;
        summary.traces.push(trace);
    }
    Ok(summary)
}

/// Builds an in-process service backed by [`sim_backend`], runs the cohort
/// and returns the resulting log. With `out`, the log is written there as it grows.
pub async fn simulate_to_log(config: &SimConfig, out: Option<&Path>) -> Result<(EventLog, SimSummary), SimError> {
    let log = match out {
        Some(p) => {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| SimError::Config(format!("{}: {e}", p.display())))?;
            }
            EventLog::open(p).map_err(|e| SimError::Config(e.to_string()))?
        }
        None => EventLog::in_memory(),
    };
    let quiz = assets::sample_quizzes()
        .into_iter()
        .find(|q| q.quiz_id == config.quiz_id)
        .ok_or_else(|| SimError::Config(format!("unknown quiz {}", config.quiz_id)))?;
    let answer_key: Vec<(ErrorLabel, String)> = quiz
        .options
        .iter()
        .map(|o| (o.mapped_label, o.option_key.clone()))
        .collect();
    let gateway = Gateway::new(Arc::new(sim_backend()), GatewayConfig::unthrottled())
        .map_err(|e| SimError::Config(e.to_string()))?;
    let options = ServiceOptions {
        strategy: ClassificationStrategy::few_shot(3, true),
        request: RequestSettings::default(),
        anonymization_key: format!("sim-{}", config.seed),
        id_nonce: format!("sim-{}", config.seed),
    };
    let service = SessionService::new(vec![quiz], assets::sample_bank(), Arc::new(gateway), log, options)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let target = InProcessTarget {
        service: Arc::new(service),
    };
    let summary = simulate_cohort(config, &target, &answer_key).await?;
    let service = Arc::try_unwrap(target.service).map_err(|_| SimError::Config("service still shared".into()))?;
    let log = service.into_log();
    log.flush().map_err(|e| SimError::Config(e.to_string()))?;
    Ok((log, summary))
}
