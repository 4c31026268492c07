//! Domain types shared across the crate and strategy-essay validation.
//!
//! Every type here is an immutable value with a canonical snake_case JSON
//! encoding. Those encodings double as the wire format of the HTTP API and
//! the line format of the event log.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of whitespace-delimited words in a strategy essay.
pub const MIN_ESSAY_WORDS: usize = 50;

/// The four-way outcome space used by classification, answers and transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLabel {
    Correct,
    Direction,
    Position,
    PositionDirection,
}

impl ErrorLabel {
    /// All variants in enum order. Matrix rows/columns and few-shot grouping follow this order.
    pub const ALL: [ErrorLabel; 4] = [
        ErrorLabel::Correct,
        ErrorLabel::Direction,
        ErrorLabel::Position,
        ErrorLabel::PositionDirection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorLabel::Correct => "correct",
            ErrorLabel::Direction => "direction",
            ErrorLabel::Position => "position",
            ErrorLabel::PositionDirection => "position-direction",
        }
    }

    pub fn short_code(self) -> char {
        match self {
            ErrorLabel::Correct => 'C',
            ErrorLabel::Direction => 'D',
            ErrorLabel::Position => 'P',
            ErrorLabel::PositionDirection => 'X',
        }
    }

    pub fn from_short_code(code: char) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.short_code() == code)
    }
}

impl fmt::Display for ErrorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown error label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for ErrorLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Counts maximal runs of non-whitespace characters.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// A student's prose description of how they plan to solve a problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyEssay {
    pub text: String,
    pub word_count: usize,
    /// UTC milliseconds since the Unix epoch.
    pub submitted_at: i64,
}

impl StrategyEssay {
    pub fn new(text: impl Into<String>, submitted_at: i64) -> Self {
        let text = text.into();
        let word_count = word_count(&text);
        Self {
            text,
            word_count,
            submitted_at,
        }
    }
}

/// `next.word_count - prev.word_count`.
pub fn word_count_delta(prev: &StrategyEssay, next: &StrategyEssay) -> i64 {
    next.word_count as i64 - prev.word_count as i64
}

/// An essay that passed [`validate_essay`]. Only constructible through validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidatedEssay(StrategyEssay);

impl ValidatedEssay {
    pub fn essay(&self) -> &StrategyEssay {
        &self.0
    }

    pub fn text(&self) -> &str {
        &self.0.text
    }

    pub fn word_count(&self) -> usize {
        self.0.word_count
    }

    pub fn into_inner(self) -> StrategyEssay {
        self.0
    }
}

/// A single broken essay rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EssayViolation {
    #[error("essay has {word_count} words, at least {MIN_ESSAY_WORDS} required")]
    TooShort { word_count: usize },
    /// Character offsets (not byte offsets) of every digit.
    #[error("essay contains digits at character positions {positions:?}")]
    ContainsDigits { positions: Vec<usize> },
    #[error("essay contains forbidden symbols {characters:?}")]
    ContainsSymbols { characters: BTreeSet<char> },
}

/// Every rule an essay broke, in rule order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("essay rejected: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub violations: Vec<EssayViolation>,
}

impl ValidationError {
    pub fn is_too_short(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, EssayViolation::TooShort { .. }))
    }
}

const FORBIDDEN_SYMBOLS: &[char] = &[
    '=', '+', '-', '\u{2212}', '*', '/', '^', '<', '>', '\u{2211}', '\u{222b}', '\u{221a}',
];

fn is_greek(c: char) -> bool {
    matches!(c, '\u{0370}'..='\u{03FF}' | '\u{1F00}'..='\u{1FFF}')
}

/// Whether `c` at `index` is a formula symbol. A hyphen is allowed only
/// between two letters (as in "free-body").
fn is_forbidden_symbol(chars: &[char], index: usize) -> bool {
    let c = chars[index];
    if c == '-' {
        let before = index.checked_sub(1).map(|i| chars[i]);
        let after = chars.get(index + 1).copied();
        let in_word = matches!((before, after), (Some(b), Some(a)) if b.is_alphabetic() && a.is_alphabetic());
        return !in_word;
    }
    FORBIDDEN_SYMBOLS.contains(&c) || is_greek(c)
}

/// Checks the course rules: at least 50 words, no digits, no formula symbols.
pub fn validate_essay(text: &str, submitted_at: i64) -> Result<ValidatedEssay, ValidationError> {
    let essay = StrategyEssay::new(text, submitted_at);
    let chars: Vec<char> = text.chars().collect();

    let mut violations = Vec::new();
    if essay.word_count < MIN_ESSAY_WORDS {
        violations.push(EssayViolation::TooShort {
            word_count: essay.word_count,
        });
    }
    let digits: Vec<usize> = chars
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_ascii_digit())
        .map(|(i, _)| i)
        .collect();
    if !digits.is_empty() {
        violations.push(EssayViolation::ContainsDigits { positions: digits });
    }
    let symbols: BTreeSet<char> = (0..chars.len())
        .filter(|&i| is_forbidden_symbol(&chars, i))
        .map(|i| chars[i])
        .collect();
    if !symbols.is_empty() {
        violations.push(EssayViolation::ContainsSymbols { characters: symbols });
    }

    if violations.is_empty() {
        Ok(ValidatedEssay(essay))
    } else {
        Err(ValidationError { violations })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizOption {
    pub option_key: String,
    pub option_text: String,
    pub mapped_label: ErrorLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizProblem {
    pub quiz_id: String,
    pub statement: String,
    pub options: Vec<QuizOption>,
    pub correct_option: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuizError {
    #[error("quiz {quiz_id}: {count} options map to correct, exactly one required")]
    CorrectCount { quiz_id: String, count: usize },
    #[error("quiz {quiz_id}: label {label} mapped by more than one option")]
    DuplicateLabel { quiz_id: String, label: ErrorLabel },
    #[error("quiz {quiz_id}: correct_option {key} does not map to the correct label")]
    CorrectOptionMismatch { quiz_id: String, key: String },
    #[error("quiz {quiz_id}: duplicate option key {key}")]
    DuplicateKey { quiz_id: String, key: String },
}

impl QuizProblem {
    pub fn validate(&self) -> Result<(), QuizError> {
        let quiz_id = self.quiz_id.clone();
        let mut seen_labels = BTreeSet::new();
        let mut seen_keys = BTreeSet::new();
        for opt in &self.options {
            if !seen_keys.insert(opt.option_key.as_str()) {
                return Err(QuizError::DuplicateKey {
                    quiz_id,
                    key: opt.option_key.clone(),
                });
            }
            if !seen_labels.insert(opt.mapped_label) {
                return Err(QuizError::DuplicateLabel {
                    quiz_id,
                    label: opt.mapped_label,
                });
            }
        }
        let correct: Vec<_> = self
            .options
            .iter()
            .filter(|o| o.mapped_label == ErrorLabel::Correct)
            .collect();
        if correct.len() != 1 {
            return Err(QuizError::CorrectCount {
                quiz_id,
                count: correct.len(),
            });
        }
        if correct[0].option_key != self.correct_option {
            return Err(QuizError::CorrectOptionMismatch {
                quiz_id,
                key: self.correct_option.clone(),
            });
        }
        Ok(())
    }

    pub fn option(&self, key: &str) -> Option<&QuizOption> {
        self.options.iter().find(|o| o.option_key == key)
    }

    pub fn option_for_label(&self, label: ErrorLabel) -> Option<&QuizOption> {
        self.options.iter().find(|o| o.mapped_label == label)
    }
}

/// Expert-annotated (essay, label, feedback) triple used to ground the prompt.
///
/// The JSONL bank format uses the short field names `essay`, `label`, `feedback`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    #[serde(rename = "essay")]
    pub essay_text: String,
    pub label: ErrorLabel,
    #[serde(rename = "feedback")]
    pub expert_feedback: String,
}

impl FewShotExample {
    pub fn is_well_formed(&self) -> bool {
        !self.essay_text.trim().is_empty() && !self.expert_feedback.trim().is_empty()
    }
}

/// Structured model output for a just-in-time request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub classification: ErrorLabel,
    pub confidence: u8,
    pub secondary_classification: ErrorLabel,
    pub feedback: String,
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_index: u32,
    pub essay: StrategyEssay,
    pub response: FeedbackResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_since_prev_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub helpful: bool,
    #[serde(default)]
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_label: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub student_ref: String,
    pub quiz_id: String,
    pub turns: Vec<ConversationTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey: Option<SurveyResponse>,
}

impl Session {
    pub fn new(session_id: String, student_ref: String, quiz_id: String) -> Self {
        Self {
            session_id,
            student_ref,
            quiz_id,
            turns: Vec::new(),
            final_answer: None,
            answer_correct: None,
            survey: None,
        }
    }

    /// Two or more feedback turns.
    pub fn is_conversational(&self) -> bool {
        self.turns.len() >= 2
    }

    pub fn labels(&self) -> impl Iterator<Item = ErrorLabel> + '_ {
        self.turns.iter().map(|t| t.response.classification)
    }
}
