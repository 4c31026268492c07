//! Append-only JSONL event log and replay into materialized sessions.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ConversationTurn, ErrorLabel, Session, SurveyResponse};
use crate::io::{self, IoError};
use crate::prompt::PosthocFeedback;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Event {
    SessionCreated {
        session_id: String,
        student_ref: String,
        quiz_id: String,
    },
    TurnRecorded {
        session_id: String,
        turn: ConversationTurn,
    },
    AnswerRecorded {
        session_id: String,
        option_key: String,
        answer_correct: bool,
        answer_label: ErrorLabel,
    },
    SurveyRecorded {
        session_id: String,
        survey: SurveyResponse,
    },
    PosthocGenerated {
        assignment_id: String,
        student_ref: String,
        feedback: PosthocFeedback,
    },
    PreferenceRecorded {
        assignment_id: String,
        student_ref: String,
        order_seed: u64,
        chosen: Choice,
        reasons: Vec<String>,
    },
}

impl Event {
    /// Key of the stream whose sequence numbers this event advances.
    pub fn stream(&self) -> String {
        match self {
            Event::SessionCreated { session_id, .. }
            | Event::TurnRecorded { session_id, .. }
            | Event::AnswerRecorded { session_id, .. }
            | Event::SurveyRecorded { session_id, .. } => session_id.clone(),
            Event::PosthocGenerated {
                assignment_id,
                student_ref,
                ..
            }
            | Event::PreferenceRecorded {
                assignment_id,
                student_ref,
                ..
            } => format!("pref:{assignment_id}:{student_ref}"),
        }
    }
}

/// One log line. `seq` is global and gap-free from 1; `stream_seq` is gap-free
/// from 1 within the event's stream (a session, or an assignment/student pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub stream_seq: u64,
    pub at_ms: i64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

struct LogInner {
    writer: Option<(PathBuf, BufWriter<File>)>,
    records: Arc<Vec<LogRecord>>,
    stream_seqs: HashMap<String, u64>,
}

/// Single-writer append log. Every append is written and flushed before it returns.
pub struct EventLog {
    inner: Mutex<LogInner>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("len", &self.len()).finish()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::from_records(Vec::new(), None)
    }

    /// Opens (or creates) a file-backed log. Existing records are replayed and
    /// must pass integrity checks before new events are accepted.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let records = if path.exists() { read_log(path)? } else { Vec::new() };
        replay(&records)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| LogError::Write {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self::from_records(
            records,
            Some((path.to_path_buf(), BufWriter::new(file))),
        ))
    }

    fn from_records(records: Vec<LogRecord>, writer: Option<(PathBuf, BufWriter<File>)>) -> Self {
        let mut stream_seqs = HashMap::new();
        for r in &records {
            stream_seqs.insert(r.event.stream(), r.stream_seq);
        }
        Self {
            inner: Mutex::new(LogInner {
                writer,
                records: Arc::new(records),
                stream_seqs,
            }),
        }
    }

    pub fn append(&self, at_ms: i64, event: Event) -> Result<LogRecord, LogError> {
        let mut inner = self.inner.lock().expect("log lock");
        let stream = event.stream();
        let stream_seq = inner.stream_seqs.get(&stream).copied().unwrap_or(0) + 1;
        let record = LogRecord {
            seq: inner.records.len() as u64 + 1,
            stream_seq,
            at_ms,
            event,
        };
        if let Some((path, writer)) = inner.writer.as_mut() {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.flush())
                .map_err(|source| LogError::Write {
                    path: path.clone(),
                    source,
                })?;
        }
        inner.stream_seqs.insert(stream, stream_seq);
        Arc::make_mut(&mut inner.records).push(record.clone());
        Ok(record)
    }

    /// Records up to the current sequence number.
    pub fn snapshot(&self) -> Arc<Vec<LogRecord>> {
        self.inner.lock().expect("log lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> Result<(), LogError> {
        let mut inner = self.inner.lock().expect("log lock");
        if let Some((path, writer)) = inner.writer.as_mut() {
            writer.flush().map_err(|source| LogError::Write {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, IoError> {
    io::read_jsonl(path)
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, IoError> {
    io::parse_jsonl(text)
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<(), LogError> {
    std::fs::write(path, io::to_jsonl(records)).map_err(|source| LogError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("record {index}: expected seq {expected}, found {found}")]
    SeqGap { index: usize, expected: u64, found: u64 },
    #[error("record seq {seq}: expected stream_seq {expected} for {stream}, found {found}")]
    StreamSeqGap {
        seq: u64,
        stream: String,
        expected: u64,
        found: u64,
    },
    #[error("record seq {seq}: session {session_id} created twice")]
    DuplicateSession { seq: u64, session_id: String },
    #[error("record seq {seq}: unknown session {session_id}")]
    UnknownSession { seq: u64, session_id: String },
    #[error("record seq {seq}: expected turn {expected}, found {found}")]
    TurnOrder { seq: u64, expected: u32, found: u32 },
    #[error("record seq {seq}: negative latency")]
    NegativeLatency { seq: u64 },
    #[error("record seq {seq}: {what} on a session that is {state}")]
    BadState {
        seq: u64,
        what: &'static str,
        state: &'static str,
    },
    #[error("record seq {seq}: preference for {stream} without generated feedback")]
    PreferenceWithoutFeedback { seq: u64, stream: String },
    #[error("record seq {seq}: duplicate {what} for {stream}")]
    DuplicatePreference {
        seq: u64,
        stream: String,
        what: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreferenceState {
    pub assignment_id: String,
    pub student_ref: String,
    pub feedback: PosthocFeedback,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Choice>,
    pub reasons: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
}

/// Everything a log reconstructs. Sessions are in creation order; preference
/// entries are keyed by (assignment_id, student_ref).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LogState {
    pub sessions: Vec<Session>,
    pub answer_labels: BTreeMap<String, ErrorLabel>,
    pub preferences: BTreeMap<(String, String), PreferenceState>,
    pub last_seq: u64,
}

impl LogState {
    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.session_id == id)
    }
}

/// Rebuilds all sessions and preference records, checking every log invariant.
pub fn replay(records: &[LogRecord]) -> Result<LogState, ReplayError> {
    let mut state = LogState::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut stream_seqs: HashMap<String, u64> = HashMap::new();

    for (i, r) in records.iter().enumerate() {
        let seq = r.seq;
        if seq != i as u64 + 1 {
            return Err(ReplayError::SeqGap {
                index: i,
                expected: i as u64 + 1,
                found: seq,
            });
        }
        let stream = r.event.stream();
        let expected = stream_seqs.get(&stream).copied().unwrap_or(0) + 1;
        if r.stream_seq != expected {
            return Err(ReplayError::StreamSeqGap {
                seq,
                stream,
                expected,
                found: r.stream_seq,
            });
        }
        stream_seqs.insert(stream.clone(), expected);

        let session_idx = |id: &str| -> Result<usize, ReplayError> {
            index.get(id).copied().ok_or_else(|| ReplayError::UnknownSession {
                seq,
                session_id: id.to_string(),
            })
        };

        match &r.event {
            Event::SessionCreated {
                session_id,
                student_ref,
                quiz_id,
            } => {
                if index.contains_key(session_id) {
                    return Err(ReplayError::DuplicateSession {
                        seq,
                        session_id: session_id.clone(),
                    });
                }
                index.insert(session_id.clone(), state.sessions.len());
                state
                    .sessions
                    .push(Session::new(session_id.clone(), student_ref.clone(), quiz_id.clone()));
            }
            Event::TurnRecorded { session_id, turn } => {
                let s = &mut state.sessions[session_idx(session_id)?];
                if s.final_answer.is_some() {
                    return Err(ReplayError::BadState {
                        seq,
                        what: "turn",
                        state: "answered",
                    });
                }
                let expected = s.turns.len() as u32 + 1;
                if turn.turn_index != expected {
                    return Err(ReplayError::TurnOrder {
                        seq,
                        expected,
                        found: turn.turn_index,
                    });
                }
                if turn.latency_since_prev_s.is_some_and(|l| l < 0.0) {
                    return Err(ReplayError::NegativeLatency { seq });
                }
                s.turns.push(turn.clone());
            }
            Event::AnswerRecorded {
                session_id,
                option_key,
                answer_correct,
                answer_label,
            } => {
                let s = &mut state.sessions[session_idx(session_id)?];
                if s.final_answer.is_some() {
                    return Err(ReplayError::BadState {
                        seq,
                        what: "answer",
                        state: "answered",
                    });
                }
                s.final_answer = Some(option_key.clone());
                s.answer_correct = Some(*answer_correct);
                state.answer_labels.insert(session_id.clone(), *answer_label);
            }
            Event::SurveyRecorded { session_id, survey } => {
                let s = &mut state.sessions[session_idx(session_id)?];
                if s.final_answer.is_none() {
                    return Err(ReplayError::BadState {
                        seq,
                        what: "survey",
                        state: "unanswered",
                    });
                }
                if s.survey.is_some() {
                    return Err(ReplayError::BadState {
                        seq,
                        what: "survey",
                        state: "already surveyed",
                    });
                }
                s.survey = Some(survey.clone());
            }
            Event::PosthocGenerated {
                assignment_id,
                student_ref,
                feedback,
            } => {
                let key = (assignment_id.clone(), student_ref.clone());
                if state.preferences.contains_key(&key) {
                    return Err(ReplayError::DuplicatePreference {
                        seq,
                        stream,
                        what: "generated feedback",
                    });
                }
                state.preferences.insert(
                    key,
                    PreferenceState {
                        assignment_id: assignment_id.clone(),
                        student_ref: student_ref.clone(),
                        feedback: feedback.clone(),
                        chosen: None,
                        reasons: Vec::new(),
                        order_seed: None,
                    },
                );
            }
            Event::PreferenceRecorded {
                assignment_id,
                student_ref,
                order_seed,
                chosen,
                reasons,
            } => {
                let key = (assignment_id.clone(), student_ref.clone());
                let Some(p) = state.preferences.get_mut(&key) else {
                    return Err(ReplayError::PreferenceWithoutFeedback { seq, stream });
                };
                if p.chosen.is_some() {
                    return Err(ReplayError::DuplicatePreference {
                        seq,
                        stream,
                        what: "choice",
                    });
                }
                p.chosen = Some(*chosen);
                p.reasons = reasons.clone();
                p.order_seed = Some(*order_seed);
            }
        }
        state.last_seq = seq;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{FeedbackResponse, StrategyEssay};

    fn turn(i: u32, label: ErrorLabel) -> ConversationTurn {
        ConversationTurn {
            turn_index: i,
            essay: StrategyEssay::new("some words", 1000 * i as i64),
            response: FeedbackResponse {
                classification: label,
                confidence: 3,
                secondary_classification: label,
                feedback: "f".into(),
                degraded: false,
            },
            latency_since_prev_s: (i > 1).then_some(1.0),
        }
    }

    fn created(id: &str) -> Event {
        Event::SessionCreated {
            session_id: id.into(),
            student_ref: "stu".into(),
            quiz_id: "q".into(),
        }
    }

    #[test]
    fn file_log_round_trips_through_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        {
            let log = EventLog::open(&path).unwrap();
            log.append(1, created("s1")).unwrap();
            log.append(
                2,
                Event::TurnRecorded {
                    session_id: "s1".into(),
                    turn: turn(1, ErrorLabel::Direction),
                },
            )
            .unwrap();
            log.append(3, created("s2")).unwrap();
            let r = log
                .append(
                    4,
                    Event::TurnRecorded {
                        session_id: "s1".into(),
                        turn: turn(2, ErrorLabel::Correct),
                    },
                )
                .unwrap();
            assert_eq!((r.seq, r.stream_seq), (4, 3));
        }
        let records = read_log(&path).unwrap();
        let state = replay(&records).unwrap();
        assert_eq!(state.sessions.len(), 2);
        assert_eq!(state.sessions[0].turns.len(), 2);
        // reopening continues both counters
        let log = EventLog::open(&path).unwrap();
        let r = log
            .append(
                5,
                Event::TurnRecorded {
                    session_id: "s2".into(),
                    turn: turn(1, ErrorLabel::Correct),
                },
            )
            .unwrap();
        assert_eq!((r.seq, r.stream_seq), (5, 2));
        assert_eq!(
            replay(&log.snapshot()).unwrap(),
            replay(&read_log(&path).unwrap()).unwrap()
        );
    }

    #[test]
    fn replay_rejects_broken_logs() {
        let log = EventLog::in_memory();
        log.append(1, created("s1")).unwrap();
        log.append(
            2,
            Event::TurnRecorded {
                session_id: "s1".into(),
                turn: turn(1, ErrorLabel::Direction),
            },
        )
        .unwrap();
        let good = log.snapshot().to_vec();

        let mut skipped_turn = good.clone();
        if let Event::TurnRecorded { turn, .. } = &mut skipped_turn[1].event {
            turn.turn_index = 2;
        }
        assert!(matches!(replay(&skipped_turn), Err(ReplayError::TurnOrder { .. })));

        let mut gap = good.clone();
        gap[1].seq = 3;
        assert!(matches!(replay(&gap), Err(ReplayError::SeqGap { .. })));

        let mut stream_gap = good.clone();
        stream_gap[1].stream_seq = 5;
        assert!(matches!(replay(&stream_gap), Err(ReplayError::StreamSeqGap { .. })));

        let orphan = vec![LogRecord {
            seq: 1,
            stream_seq: 1,
            at_ms: 0,
            event: Event::SurveyRecorded {
                session_id: "nope".into(),
                survey: SurveyResponse {
                    helpful: true,
                    reasons: vec![],
                    free_text: None,
                    cluster_label: None,
                },
            },
        }];
        assert!(matches!(replay(&orphan), Err(ReplayError::UnknownSession { .. })));
    }

    #[test]
    fn record_json_shape() {
        let r = LogRecord {
            seq: 1,
            stream_seq: 1,
            at_ms: 7,
            event: created("s1"),
        };
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["type"], "SessionCreated");
        assert_eq!(json["session_id"], "s1");
        let back: LogRecord = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
