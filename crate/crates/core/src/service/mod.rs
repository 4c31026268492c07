//! The just-in-time intervention service: session lifecycle, feedback turns,
//! answers, surveys and the novice/advanced preference survey.
//!
//! All state changes go through the [`EventLog`]; the in-memory index is a
//! materialization of it. Per-session mutations are serialized by a
//! per-session async mutex, so concurrent submissions to one session get
//! consecutive turn indices.

pub mod events;
pub mod http;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::classifier::{classify, ClassificationStrategy, ClassifyError, RequestSettings};
use crate::domain::{
    validate_essay, ConversationTurn, ErrorLabel, FewShotExample, QuizProblem, Session, SurveyResponse, ValidationError,
};
use crate::gateway::{CompletionRequest, DispatchOutcome, Gateway};
use crate::prompt::{build_posthoc_prompt, parse_posthoc_response, ParseError, PosthocFeedback, PromptError};

pub use events::{Choice, Event, EventLog, LogError, LogRecord, LogState, ReplayError};

/// Wall-clock source in UTC milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// Keyed one-way hash of a raw student identifier.
#[derive(Clone)]
pub struct Anonymizer {
    key: Vec<u8>,
}

impl std::fmt::Debug for Anonymizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Anonymizer(..)")
    }
}

impl Anonymizer {
    pub fn new(key: impl AsRef<[u8]>) -> Self {
        Self {
            key: key.as_ref().to_vec(),
        }
    }

    pub fn student_ref(&self, raw_id: &str) -> String {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("HMAC accepts any key length");
        mac.update(raw_id.as_bytes());
        let tag = mac.finalize().into_bytes();
        format!("stu_{}", hex::encode(&tag[..16]))
    }
}

fn sha256_u64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Idempotency key for a feedback turn: a hash of (session_id, turn_index).
pub fn turn_idempotency_key(session_id: &str, turn_index: u32) -> String {
    format!("{:016x}", sha256_u64(&[session_id, &turn_index.to_string()]))
}

/// Presentation-order seed for the preference survey. Even seeds show the
/// novice text as variant A.
pub fn preference_order_seed(assignment_id: &str, student_ref: &str) -> u64 {
    sha256_u64(&[assignment_id, student_ref])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
}

/// The only thing a student sees after submitting an essay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub turn_index: u32,
    pub feedback: String,
    pub degraded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub answer_correct: bool,
}

/// A preference pair as shown to a student: anonymous variants only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub assignment_id: String,
    pub variant_a: String,
    pub variant_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Choice>,
    #[serde(default)]
    pub reasons: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown quiz {0}")]
    UnknownQuiz(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    ValidationFailed(ValidationError),
    #[error("session is closed")]
    SessionClosed,
    #[error("expected turn {expected}, request was for turn {requested}")]
    TurnConflict { expected: u32, requested: u32 },
    #[error("feedback service busy, retry shortly")]
    Busy,
    #[error("unknown option {0}")]
    UnknownOption(String),
    #[error("answer already recorded")]
    AlreadyAnswered,
    #[error("answer the quiz before the survey")]
    NotAnswered,
    #[error("survey already recorded")]
    DuplicateSurvey,
    #[error("no post-hoc feedback generated for this assignment and student")]
    NotGenerated,
    #[error("post-hoc feedback already generated for this assignment and student")]
    AlreadyGenerated,
    #[error("preference already recorded")]
    AlreadyChosen,
    #[error("post-hoc generation failed: {0}")]
    PosthocFailed(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl From<ClassifyError> for ServiceError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::Busy => ServiceError::Busy,
            ClassifyError::Prompt(p) => ServiceError::Prompt(p),
            ClassifyError::Strategy(s) => ServiceError::PosthocFailed(s.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub strategy: ClassificationStrategy,
    pub request: RequestSettings,
    pub anonymization_key: String,
    /// Mixed into session ids so ids from different deployments never collide.
    pub id_nonce: String,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            strategy: ClassificationStrategy::default(),
            request: RequestSettings::default(),
            anonymization_key: "change-me".into(),
            id_nonce: "default".into(),
        }
    }
}

struct SessionSlot {
    session: Session,
}

type PreferenceSlots = HashMap<(String, String), Arc<Mutex<events::PreferenceState>>>;

pub struct SessionService {
    quizzes: HashMap<String, QuizProblem>,
    bank: Vec<FewShotExample>,
    options: ServiceOptions,
    gateway: Arc<Gateway>,
    log: EventLog,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionSlot>>>>,
    preferences: RwLock<PreferenceSlots>,
    next_id: AtomicU64,
    anonymizer: Anonymizer,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for SessionService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionService")
            .field("quizzes", &self.quizzes.len())
            .field("log", &self.log)
            .finish()
    }
}

impl SessionService {
    /// Builds the service, restoring state from whatever the log already holds.
    pub fn new(
        quizzes: Vec<QuizProblem>,
        bank: Vec<FewShotExample>,
        gateway: Arc<Gateway>,
        log: EventLog,
        options: ServiceOptions,
    ) -> Result<Self, ServiceError> {
        let state = events::replay(&log.snapshot()).map_err(LogError::from)?;
        let sessions = state
            .sessions
            .into_iter()
            .map(|s| (s.session_id.clone(), Arc::new(Mutex::new(SessionSlot { session: s }))))
            .collect::<HashMap<_, _>>();
        let preferences = state
            .preferences
            .into_iter()
            .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
            .collect();
        Ok(Self {
            quizzes: quizzes.into_iter().map(|q| (q.quiz_id.clone(), q)).collect(),
            bank,
            anonymizer: Anonymizer::new(&options.anonymization_key),
            next_id: AtomicU64::new(sessions.len() as u64),
            sessions: RwLock::new(sessions),
            preferences: RwLock::new(preferences),
            options,
            gateway,
            log,
            clock: Arc::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn quiz(&self, quiz_id: &str) -> Option<&QuizProblem> {
        self.quizzes.get(quiz_id)
    }

    pub fn anonymizer(&self) -> &Anonymizer {
        &self.anonymizer
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    fn slot(&self, session_id: &str) -> Result<Arc<Mutex<SessionSlot>>, ServiceError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    pub async fn create_session(&self, student_id: &str, quiz_id: &str) -> Result<CreateSessionResponse, ServiceError> {
        self.create_session_at(student_id, quiz_id, self.clock.now_ms()).await
    }

    /// `student_id` is the raw identifier; only its keyed hash is stored.
    pub async fn create_session_at(
        &self,
        student_id: &str,
        quiz_id: &str,
        at_ms: i64,
    ) -> Result<CreateSessionResponse, ServiceError> {
        if !self.quizzes.contains_key(quiz_id) {
            return Err(ServiceError::UnknownQuiz(quiz_id.to_string()));
        }
        let student_ref = self.anonymizer.student_ref(student_id);
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        let session_id = format!("ses_{:016x}", sha256_u64(&[&self.options.id_nonce, &n.to_string()]));
        let session = Session::new(session_id.clone(), student_ref.clone(), quiz_id.to_string());
        let slot = Arc::new(Mutex::new(SessionSlot { session }));
        // hold the slot while logging so no turn can be logged before creation
        let guard = slot.clone().lock_owned().await;
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(session_id.clone(), slot);
        self.log.append(
            at_ms,
            Event::SessionCreated {
                session_id: session_id.clone(),
                student_ref,
                quiz_id: quiz_id.to_string(),
            },
        )?;
        drop(guard);
        Ok(CreateSessionResponse { session_id })
    }

    pub async fn submit_essay(
        &self,
        session_id: &str,
        text: &str,
        expected_turn: Option<u32>,
    ) -> Result<SubmitResponse, ServiceError> {
        self.submit_essay_at(session_id, text, self.clock.now_ms(), expected_turn)
            .await
    }

    /// Validates, classifies and records one feedback turn.
    ///
    /// When `expected_turn` names an already-recorded turn, that turn's
    /// feedback is returned again without re-recording it.
    pub async fn submit_essay_at(
        &self,
        session_id: &str,
        text: &str,
        at_ms: i64,
        expected_turn: Option<u32>,
    ) -> Result<SubmitResponse, ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().await;
        let session = &slot.session;
        let next_index = session.turns.len() as u32 + 1;
        if let Some(requested) = expected_turn {
            if requested >= 1 && requested < next_index {
                let turn = &session.turns[requested as usize - 1];
                return Ok(SubmitResponse {
                    turn_index: turn.turn_index,
                    feedback: turn.response.feedback.clone(),
                    degraded: turn.response.degraded,
                });
            }
            if requested != next_index {
                return Err(ServiceError::TurnConflict {
                    expected: next_index,
                    requested,
                });
            }
        }
        if session.final_answer.is_some() {
            return Err(ServiceError::SessionClosed);
        }
        let essay = validate_essay(text, at_ms).map_err(ServiceError::ValidationFailed)?;
        let problem = self
            .quizzes
            .get(&session.quiz_id)
            .ok_or_else(|| ServiceError::UnknownQuiz(session.quiz_id.clone()))?;
        let key = turn_idempotency_key(session_id, next_index);
        let response = classify(
            &essay,
            problem,
            &self.bank,
            &self.options.strategy,
            &self.gateway,
            &self.options.request,
            &key,
        )
        .await?;

        let latency_since_prev_s = session
            .turns
            .last()
            .map(|prev| ((at_ms - prev.essay.submitted_at) as f64 / 1000.0).max(0.0));
        let turn = ConversationTurn {
            turn_index: next_index,
            essay: essay.into_inner(),
            response,
            latency_since_prev_s,
        };
        self.log.append(
            at_ms,
            Event::TurnRecorded {
                session_id: session_id.to_string(),
                turn: turn.clone(),
            },
        )?;
        let out = SubmitResponse {
            turn_index: turn.turn_index,
            feedback: turn.response.feedback.clone(),
            degraded: turn.response.degraded,
        };
        slot.session.turns.push(turn);
        Ok(out)
    }

    pub async fn record_answer(&self, session_id: &str, option_key: &str) -> Result<AnswerResponse, ServiceError> {
        self.record_answer_at(session_id, option_key, self.clock.now_ms()).await
    }

    /// Records the final answer and closes the session to further essays.
    pub async fn record_answer_at(
        &self,
        session_id: &str,
        option_key: &str,
        at_ms: i64,
    ) -> Result<AnswerResponse, ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().await;
        if slot.session.final_answer.is_some() {
            return Err(ServiceError::AlreadyAnswered);
        }
        let problem = self
            .quizzes
            .get(&slot.session.quiz_id)
            .ok_or_else(|| ServiceError::UnknownQuiz(slot.session.quiz_id.clone()))?;
        let option = problem
            .option(option_key)
            .ok_or_else(|| ServiceError::UnknownOption(option_key.to_string()))?;
        let answer_correct = option.option_key == problem.correct_option;
        self.log.append(
            at_ms,
            Event::AnswerRecorded {
                session_id: session_id.to_string(),
                option_key: option_key.to_string(),
                answer_correct,
                answer_label: option.mapped_label,
            },
        )?;
        slot.session.final_answer = Some(option_key.to_string());
        slot.session.answer_correct = Some(answer_correct);
        Ok(AnswerResponse { answer_correct })
    }

    pub async fn record_survey(&self, session_id: &str, survey: SurveyResponse) -> Result<(), ServiceError> {
        self.record_survey_at(session_id, survey, self.clock.now_ms()).await
    }

    pub async fn record_survey_at(
        &self,
        session_id: &str,
        survey: SurveyResponse,
        at_ms: i64,
    ) -> Result<(), ServiceError> {
        let slot = self.slot(session_id)?;
        let mut slot = slot.lock().await;
        if slot.session.final_answer.is_none() {
            return Err(ServiceError::NotAnswered);
        }
        if slot.session.survey.is_some() {
            return Err(ServiceError::DuplicateSurvey);
        }
        self.log.append(
            at_ms,
            Event::SurveyRecorded {
                session_id: session_id.to_string(),
                survey: survey.clone(),
            },
        )?;
        slot.session.survey = Some(survey);
        Ok(())
    }

    /// Full session detail, including labels. Not for student-facing use.
    pub async fn admin_session(&self, session_id: &str) -> Result<Session, ServiceError> {
        let slot = self.slot(session_id)?;
        let slot = slot.lock().await;
        Ok(slot.session.clone())
    }

    /// Stores externally generated post-hoc feedback for a student.
    pub async fn register_posthoc(
        &self,
        assignment_id: &str,
        student_id: &str,
        feedback: PosthocFeedback,
    ) -> Result<(), ServiceError> {
        let student_ref = self.anonymizer.student_ref(student_id);
        let key = (assignment_id.to_string(), student_ref.clone());
        let mut prefs = self.preferences.write().expect("preferences lock");
        if prefs.contains_key(&key) {
            return Err(ServiceError::AlreadyGenerated);
        }
        self.log.append(
            self.clock.now_ms(),
            Event::PosthocGenerated {
                assignment_id: assignment_id.to_string(),
                student_ref: student_ref.clone(),
                feedback: feedback.clone(),
            },
        )?;
        prefs.insert(
            key,
            Arc::new(Mutex::new(events::PreferenceState {
                assignment_id: assignment_id.to_string(),
                student_ref,
                feedback,
                chosen: None,
                reasons: Vec::new(),
                order_seed: None,
            })),
        );
        Ok(())
    }

    /// Generates novice and advanced feedback for a finished essay through the gateway.
    pub async fn generate_posthoc(
        &self,
        assignment_id: &str,
        student_id: &str,
        quiz_id: &str,
        essay_text: &str,
        expert_rubric: &str,
    ) -> Result<PosthocFeedback, ServiceError> {
        let problem = self
            .quizzes
            .get(quiz_id)
            .ok_or_else(|| ServiceError::UnknownQuiz(quiz_id.to_string()))?;
        let essay = validate_essay(essay_text, self.clock.now_ms()).map_err(ServiceError::ValidationFailed)?;
        let prompt = build_posthoc_prompt(problem, &essay, expert_rubric)?;
        let key = format!("{:016x}", sha256_u64(&["posthoc", assignment_id, student_id]));
        let mut request = CompletionRequest::new(prompt, key);
        request.max_tokens = self.options.request.max_tokens;
        request.temperature = self.options.request.temperature;
        request.timeout_s = self.options.request.timeout_s;
        let feedback = match self.gateway.dispatch(&request).await {
            DispatchOutcome::Busy => return Err(ServiceError::Busy),
            DispatchOutcome::Degraded { error, .. } => return Err(ServiceError::PosthocFailed(error.to_string())),
            DispatchOutcome::Completed(r) => {
                parse_posthoc_response(&r.text).map_err(|e: ParseError| ServiceError::PosthocFailed(e.to_string()))?
            }
        };
        self.register_posthoc(assignment_id, student_id, feedback.clone())
            .await?;
        Ok(feedback)
    }

    fn preference_slot(
        &self,
        assignment_id: &str,
        student_ref: &str,
    ) -> Result<Arc<Mutex<events::PreferenceState>>, ServiceError> {
        self.preferences
            .read()
            .expect("preferences lock")
            .get(&(assignment_id.to_string(), student_ref.to_string()))
            .cloned()
            .ok_or(ServiceError::NotGenerated)
    }

    fn arrange(assignment_id: &str, student_ref: &str, p: &events::PreferenceState) -> PreferencePair {
        let seed = preference_order_seed(assignment_id, student_ref);
        let (a, b) = if seed.is_multiple_of(2) {
            (&p.feedback.novice_feedback, &p.feedback.advanced_feedback)
        } else {
            (&p.feedback.advanced_feedback, &p.feedback.novice_feedback)
        };
        PreferencePair {
            assignment_id: assignment_id.to_string(),
            variant_a: a.clone(),
            variant_b: b.clone(),
            chosen: p.chosen,
            reasons: p.reasons.clone(),
        }
    }

    pub async fn get_preference_pair(
        &self,
        assignment_id: &str,
        student_id: &str,
    ) -> Result<PreferencePair, ServiceError> {
        let student_ref = self.anonymizer.student_ref(student_id);
        let slot = self.preference_slot(assignment_id, &student_ref)?;
        let p = slot.lock().await;
        Ok(Self::arrange(assignment_id, &student_ref, &p))
    }

    pub async fn record_preference(
        &self,
        assignment_id: &str,
        student_id: &str,
        chosen: Choice,
        reasons: Vec<String>,
    ) -> Result<PreferencePair, ServiceError> {
        let student_ref = self.anonymizer.student_ref(student_id);
        let slot = self.preference_slot(assignment_id, &student_ref)?;
        let mut p = slot.lock().await;
        if p.chosen.is_some() {
            return Err(ServiceError::AlreadyChosen);
        }
        let order_seed = preference_order_seed(assignment_id, &student_ref);
        self.log.append(
            self.clock.now_ms(),
            Event::PreferenceRecorded {
                assignment_id: assignment_id.to_string(),
                student_ref: student_ref.clone(),
                order_seed,
                chosen,
                reasons: reasons.clone(),
            },
        )?;
        p.chosen = Some(chosen);
        p.reasons = reasons;
        p.order_seed = Some(order_seed);
        Ok(Self::arrange(assignment_id, &student_ref, &p))
    }

    /// Replayed view of the log at the current sequence number.
    pub fn snapshot(&self) -> Result<LogState, ServiceError> {
        Ok(events::replay(&self.log.snapshot()).map_err(LogError::from)?)
    }
}

const HIDDEN_KEYS: &[&str] = &[
    "classification",
    "secondary_classification",
    "confidence",
    "label",
    "answer_label",
    "correct_option",
    "mapped_label",
];

/// Fields whose values are preference variant letters, which share their
/// alphabet with option keys.
const VARIANT_KEYS: &[&str] = &["chosen"];

/// Finds anything in a student-facing JSON body that leaks grading detail:
/// a hidden field name, or a string value equal to a label name or to the
/// quiz's correct option key (outside variant-letter fields) or text.
pub fn scan_student_response(body: &Value, quiz: &QuizProblem) -> Vec<String> {
    let mut leaks = Vec::new();
    let correct_text = quiz.option(&quiz.correct_option).map(|o| o.option_text.as_str());
    fn walk(
        v: &Value,
        path: &str,
        field: &str,
        quiz: &QuizProblem,
        correct_text: Option<&str>,
        leaks: &mut Vec<String>,
    ) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let p = format!("{path}.{k}");
                    if HIDDEN_KEYS.contains(&k.as_str()) {
                        leaks.push(format!("{p}: hidden field"));
                    }
                    walk(child, &p, k, quiz, correct_text, leaks);
                }
            }
            Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    walk(child, &format!("{path}[{i}]"), field, quiz, correct_text, leaks);
                }
            }
            Value::String(s) => {
                let t = s.trim();
                if ErrorLabel::ALL.iter().any(|l| t.eq_ignore_ascii_case(l.as_str())) {
                    leaks.push(format!("{path}: label name {t:?}"));
                }
                let key_leak = t == quiz.correct_option && !VARIANT_KEYS.contains(&field);
                if key_leak || Some(t) == correct_text {
                    leaks.push(format!("{path}: correct option {t:?}"));
                }
            }
            _ => {}
        }
    }
    walk(body, "$", "", quiz, correct_text, &mut leaks);
    leaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{sample_bank, sample_quiz};
    use crate::domain::FeedbackResponse;
    use crate::gateway::{CompletionParams, GatewayConfig, ScriptRule, ScriptedBackend};
    use crate::prompt::{render_jit_response, KnowledgeLevel};

    fn reply(label: ErrorLabel) -> String {
        render_jit_response(&FeedbackResponse {
            classification: label,
            confidence: 4,
            secondary_classification: ErrorLabel::Correct,
            feedback: "Think about which way the force on the bottom block points.".into(),
            degraded: false,
        })
    }

    fn service_with(backend: ScriptedBackend, log: EventLog) -> SessionService {
        let gw = Arc::new(Gateway::new(Arc::new(backend), GatewayConfig::unthrottled()).unwrap());
        SessionService::new(vec![sample_quiz()], sample_bank(), gw, log, ServiceOptions::default()).unwrap()
    }

    fn service() -> SessionService {
        service_with(
            ScriptedBackend::new("s").with_default_response(reply(ErrorLabel::Direction)),
            EventLog::in_memory(),
        )
    }

    fn essay() -> String {
        sample_bank()[4].essay_text.clone()
    }

    #[tokio::test]
    async fn create_session_cases() {
        let svc = service();
        let a = svc.create_session("alice", "stacked-blocks").await.unwrap();
        let b = svc.create_session("alice", "stacked-blocks").await.unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert!(matches!(
            svc.create_session("alice", "nope").await,
            Err(ServiceError::UnknownQuiz(_))
        ));
        let s = svc.admin_session(&a.session_id).await.unwrap();
        assert!(s.student_ref.starts_with("stu_"));
        assert!(!s.student_ref.contains("alice"));
    }

    #[tokio::test]
    async fn turns_latency_and_validation() {
        let svc = service();
        let id = svc.create_session("bob", "stacked-blocks").await.unwrap().session_id;
        let t1 = svc.submit_essay_at(&id, &essay(), 1_000_000, None).await.unwrap();
        assert_eq!(t1.turn_index, 1);
        assert!(!t1.feedback.is_empty());
        let t2 = svc.submit_essay_at(&id, &essay(), 1_090_000, None).await.unwrap();
        assert_eq!(t2.turn_index, 2);
        let s = svc.admin_session(&id).await.unwrap();
        assert_eq!(s.turns[0].latency_since_prev_s, None);
        assert_eq!(s.turns[1].latency_since_prev_s, Some(90.0));
        assert_eq!(s.turns[1].response.classification, ErrorLabel::Direction);

        let short = vec!["word"; 40].join(" ");
        match svc.submit_essay(&id, &short, None).await {
            Err(ServiceError::ValidationFailed(v)) => assert!(v.is_too_short()),
            other => panic!("{other:?}"),
        }
    }

    #[tokio::test]
    async fn client_retry_does_not_double_record() {
        let svc = service();
        let id = svc.create_session("c", "stacked-blocks").await.unwrap().session_id;
        let first = svc.submit_essay(&id, &essay(), Some(1)).await.unwrap();
        let again = svc.submit_essay(&id, &essay(), Some(1)).await.unwrap();
        assert_eq!(first, again);
        assert_eq!(svc.admin_session(&id).await.unwrap().turns.len(), 1);
        assert!(matches!(
            svc.submit_essay(&id, &essay(), Some(5)).await,
            Err(ServiceError::TurnConflict {
                expected: 2,
                requested: 5
            })
        ));
    }

    #[tokio::test]
    async fn answers_close_the_session() {
        let svc = service();
        let id = svc.create_session("d", "stacked-blocks").await.unwrap().session_id;
        svc.submit_essay(&id, &essay(), None).await.unwrap();
        assert!(matches!(
            svc.record_survey(&id, survey()).await,
            Err(ServiceError::NotAnswered)
        ));
        assert!(matches!(
            svc.record_answer(&id, "Z").await,
            Err(ServiceError::UnknownOption(_))
        ));
        assert_eq!(
            svc.record_answer(&id, "B").await.unwrap(),
            AnswerResponse { answer_correct: false }
        );
        assert!(matches!(
            svc.record_answer(&id, "A").await,
            Err(ServiceError::AlreadyAnswered)
        ));
        assert!(matches!(
            svc.submit_essay(&id, &essay(), None).await,
            Err(ServiceError::SessionClosed)
        ));
        svc.record_survey(&id, survey()).await.unwrap();
        assert!(matches!(
            svc.record_survey(&id, survey()).await,
            Err(ServiceError::DuplicateSurvey)
        ));
        let state = svc.snapshot().unwrap();
        assert_eq!(state.answer_labels[&id], ErrorLabel::Direction);

        let id2 = svc.create_session("e", "stacked-blocks").await.unwrap().session_id;
        assert!(svc.record_answer(&id2, "A").await.unwrap().answer_correct);
    }

    fn survey() -> SurveyResponse {
        SurveyResponse {
            helpful: true,
            reasons: vec!["clarified overlooked aspects".into()],
            free_text: None,
            cluster_label: None,
        }
    }

    #[tokio::test]
    async fn concurrent_submissions_get_consecutive_turns() {
        let svc = Arc::new(service_with(
            ScriptedBackend::new("s")
                .with_default_response(reply(ErrorLabel::Correct))
                .with_latency(std::time::Duration::from_millis(3)),
            EventLog::in_memory(),
        ));
        let id = svc.create_session("f", "stacked-blocks").await.unwrap().session_id;
        let tasks: Vec<_> = (0..12)
            .map(|_| {
                let svc = svc.clone();
                let id = id.clone();
                tokio::spawn(async move { svc.submit_essay(&id, &essay(), None).await.unwrap().turn_index })
            })
            .collect();
        let mut seen = Vec::new();
        for t in tasks {
            seen.push(t.await.unwrap());
        }
        seen.sort();
        assert_eq!(seen, (1..=12).collect::<Vec<_>>());
        events::replay(&svc.log().snapshot()).unwrap();
    }

    #[tokio::test]
    async fn busy_is_not_recorded() {
        let gw_cfg = GatewayConfig {
            queue_capacity: 1,
            ..GatewayConfig::unthrottled()
        };
        let backend = ScriptedBackend::new("s")
            .with_default_response(reply(ErrorLabel::Correct))
            .with_latency(std::time::Duration::from_secs(3600));
        let gw = Arc::new(Gateway::new(Arc::new(backend), gw_cfg).unwrap());
        let svc = Arc::new(
            SessionService::new(
                vec![sample_quiz()],
                sample_bank(),
                gw.clone(),
                EventLog::in_memory(),
                ServiceOptions::default(),
            )
            .unwrap(),
        );
        let a = svc.create_session("g", "stacked-blocks").await.unwrap().session_id;
        let b = svc.create_session("h", "stacked-blocks").await.unwrap().session_id;
        let svc2 = svc.clone();
        let parked = tokio::spawn(async move { svc2.submit_essay(&a, &essay(), None).await });
        while gw.queue_depth() == 0 {
            tokio::task::yield_now().await;
        }
        assert!(matches!(
            svc.submit_essay(&b, &essay(), None).await,
            Err(ServiceError::Busy)
        ));
        assert!(svc.admin_session(&b).await.unwrap().turns.is_empty());
        parked.abort();
    }

    #[tokio::test]
    async fn restart_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let backend = || ScriptedBackend::new("s").with_default_response(reply(ErrorLabel::Position));
        let id = {
            let svc = service_with(backend(), EventLog::open(&path).unwrap());
            let id = svc.create_session("i", "stacked-blocks").await.unwrap().session_id;
            svc.submit_essay(&id, &essay(), None).await.unwrap();
            id
        };
        let svc = service_with(backend(), EventLog::open(&path).unwrap());
        let t = svc.submit_essay(&id, &essay(), None).await.unwrap();
        assert_eq!(t.turn_index, 2);
        let other = svc.create_session("j", "stacked-blocks").await.unwrap().session_id;
        assert_ne!(other, id);
    }

    #[tokio::test]
    async fn preference_pairs() {
        let svc = service();
        assert!(matches!(
            svc.get_preference_pair("hw1", "kim").await,
            Err(ServiceError::NotGenerated)
        ));
        let fb = PosthocFeedback {
            essay_evaluation: "e".into(),
            inferred_level: KnowledgeLevel::Novice,
            novice_feedback: "novice text".into(),
            advanced_feedback: "advanced text".into(),
        };
        svc.register_posthoc("hw1", "kim", fb.clone()).await.unwrap();
        let pair = svc.get_preference_pair("hw1", "kim").await.unwrap();
        let seed = preference_order_seed("hw1", &svc.anonymizer().student_ref("kim"));
        if seed.is_multiple_of(2) {
            assert_eq!(
                (pair.variant_a.as_str(), pair.variant_b.as_str()),
                ("novice text", "advanced text")
            );
        } else {
            assert_eq!(
                (pair.variant_a.as_str(), pair.variant_b.as_str()),
                ("advanced text", "novice text")
            );
        }
        assert_eq!(svc.get_preference_pair("hw1", "kim").await.unwrap(), pair);
        let reasons = vec!["Helps me better understand the concept".to_string()];
        let chosen = svc
            .record_preference("hw1", "kim", Choice::B, reasons.clone())
            .await
            .unwrap();
        assert_eq!(chosen.reasons, reasons);
        assert!(matches!(
            svc.record_preference("hw1", "kim", Choice::A, vec![]).await,
            Err(ServiceError::AlreadyChosen)
        ));
        let state = svc.snapshot().unwrap();
        let p = state.preferences.values().next().unwrap();
        assert_eq!(p.chosen, Some(Choice::B));
    }

    #[test]
    fn novice_first_is_balanced() {
        let anon = Anonymizer::new("k");
        let n = 10_000;
        let novice_first = (0..n)
            .filter(|i| {
                preference_order_seed("assignment-7", &anon.student_ref(&format!("student-{i}"))).is_multiple_of(2)
            })
            .count();
        let frac = novice_first as f64 / n as f64;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[tokio::test]
    async fn posthoc_generation_through_gateway() {
        let raw = r#"{"Essay_Evaluation":"ok","Inferred_Level":"Advanced","Feedback":{"Novice":"n","Advanced":"a"}}"#;
        let svc = service_with(
            ScriptedBackend::new("s").with_rule(ScriptRule::contains("Expert's Strategy Essay:", raw)),
            EventLog::in_memory(),
        );
        let fb = svc
            .generate_posthoc("hw2", "lee", "stacked-blocks", &essay(), "Isolate the top block.")
            .await
            .unwrap();
        assert_eq!(fb.inferred_level, KnowledgeLevel::Advanced);
        assert!(svc.get_preference_pair("hw2", "lee").await.is_ok());
    }

    #[test]
    fn scan_flags_leaks() {
        let quiz = sample_quiz();
        let clean = serde_json::json!({"turn_index": 1, "feedback": "Check which way it points.", "degraded": false});
        assert!(scan_student_response(&clean, &quiz).is_empty());
        let leaky = serde_json::json!({"turn_index": 1, "classification": "direction", "hint": "A"});
        assert_eq!(scan_student_response(&leaky, &quiz).len(), 3);
    }

    #[tokio::test]
    async fn responder_sees_each_turn_key() {
        let keys = Arc::new(std::sync::Mutex::new(Vec::new()));
        let k2 = keys.clone();
        let backend = ScriptedBackend::new("s").with_responder(Arc::new(move |_: &str, p: &CompletionParams| {
            k2.lock().unwrap().push(p.idempotency_key.clone());
            Some(reply(ErrorLabel::Correct))
        }));
        let svc = service_with(backend, EventLog::in_memory());
        let id = svc.create_session("m", "stacked-blocks").await.unwrap().session_id;
        svc.submit_essay(&id, &essay(), None).await.unwrap();
        svc.submit_essay(&id, &essay(), None).await.unwrap();
        let keys = keys.lock().unwrap();
        assert_eq!(keys[0], turn_idempotency_key(&id, 1));
        assert_eq!(keys[1], turn_idempotency_key(&id, 2));
    }
}
