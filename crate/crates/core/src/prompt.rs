//! Prompt assembly from the bundled templates and strict parsing of model output.
//!
//! Templates use `{{name}}` markers. Rendering is a single left-to-right pass,
//! so text inserted for one marker is never re-scanned for another.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assets;
use crate::domain::{word_count, ErrorLabel, FeedbackResponse, FewShotExample, QuizProblem, ValidatedEssay};

/// Feedback longer than this is logged; it is not rejected.
pub const FEEDBACK_WARN_WORDS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Jit,
    PostHoc,
}

/// First 8 bytes of the SHA-256 of the text, big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub u64);

impl ContentHash {
    pub fn of(text: &str) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        ContentHash(u64::from_be_bytes(bytes))
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(ContentHash)
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ContentHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 16 hex digits"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub template_id: TemplateId,
    pub content_hash: ContentHash,
}

impl PromptText {
    pub fn new(text: String, template_id: TemplateId) -> Self {
        let content_hash = ContentHash::of(&text);
        Self {
            text,
            template_id,
            content_hash,
        }
    }
}

/// Whether the model is asked for a secondary label or told to repeat the primary one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    WithSecondary,
    PrimaryOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("few-shot bank has {have} {label} examples, {need} required")]
    InsufficientBank {
        label: ErrorLabel,
        have: usize,
        need: usize,
    },
    #[error("expert rubric is empty")]
    EmptyRubric,
}

/// Replaces `{{name}}` markers in one pass. Unknown markers are left as-is.
pub fn render_template(template: &str, values: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if values.contains_key(&after[..end]) => {
                out.push_str(values[&after[..end]]);
                rest = &after[end + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Statement followed by one `KEY. text` line per option.
pub fn render_quiz_problem(problem: &QuizProblem) -> String {
    let mut out = problem.statement.trim_end().to_string();
    for opt in &problem.options {
        let _ = write!(out, "\n{}. {}", opt.option_key, opt.option_text);
    }
    out
}

/// Picks the first `k` examples of each label, in bank order, grouped by label in enum order.
pub fn select_examples(bank: &[FewShotExample], k_per_label: usize) -> Result<Vec<&FewShotExample>, PromptError> {
    let mut selected = Vec::with_capacity(k_per_label * ErrorLabel::ALL.len());
    for label in ErrorLabel::ALL {
        let of_label: Vec<_> = bank.iter().filter(|e| e.label == label).collect();
        if of_label.len() < k_per_label {
            return Err(PromptError::InsufficientBank {
                label,
                have: of_label.len(),
                need: k_per_label,
            });
        }
        selected.extend(of_label.into_iter().take(k_per_label));
    }
    Ok(selected)
}

fn render_examples(examples: &[&FewShotExample]) -> String {
    if examples.is_empty() {
        return String::new();
    }
    let mut out = String::from(
        "Few-Shot Examples\n\n[Examples of student's sample strategy essay, its error type, and feedback generated by human experts]\n\n",
    );
    for (i, ex) in examples.iter().enumerate() {
        let _ = write!(
            out,
            "Example {}\nStrategy Essay: {}\nError Type: {}\nExpert Feedback: {}\n\n",
            i + 1,
            ex.essay_text.trim(),
            ex.label,
            ex.expert_feedback.trim()
        );
    }
    out
}

/// Builds the just-in-time classification prompt. `k_per_label = 0` gives the zero-shot prompt.
pub fn build_jit_prompt(
    problem: &QuizProblem,
    essay: &ValidatedEssay,
    bank: &[FewShotExample],
    k_per_label: usize,
    mode: LabelMode,
) -> Result<PromptText, PromptError> {
    let examples = select_examples(bank, k_per_label)?;
    let examples = render_examples(&examples);
    let quiz = render_quiz_problem(problem);
    let template = match mode {
        LabelMode::WithSecondary => assets::JIT_TEMPLATE,
        LabelMode::PrimaryOnly => assets::JIT_SINGLE_LABEL_TEMPLATE,
    };
    let values = BTreeMap::from([
        ("examples", examples.as_str()),
        ("quiz_problem", quiz.as_str()),
        ("student_essay", essay.text().trim()),
    ]);
    Ok(PromptText::new(render_template(template, &values), TemplateId::Jit))
}

/// Builds the post-hoc prompt asking for novice and advanced feedback variants.
pub fn build_posthoc_prompt(
    problem: &QuizProblem,
    essay: &ValidatedEssay,
    expert_rubric: &str,
) -> Result<PromptText, PromptError> {
    if expert_rubric.trim().is_empty() {
        return Err(PromptError::EmptyRubric);
    }
    let quiz = render_quiz_problem(problem);
    let values = BTreeMap::from([
        ("quiz_problem", quiz.as_str()),
        ("student_essay", essay.text().trim()),
        ("expert_rubric", expert_rubric.trim()),
    ]);
    Ok(PromptText::new(
        render_template(assets::POSTHOC_TEMPLATE, &values),
        TemplateId::PostHoc,
    ))
}

/// Recovers the student essay embedded in a just-in-time prompt.
pub fn extract_student_essay(prompt: &str) -> Option<&str> {
    let test_case = prompt.rfind("\nTEST CASE\n")?;
    let tail = &prompt[test_case..];
    const START: &str = "\nStudent Essay:\n";
    const END: &str = "\n\nINSTRUCTIONS:";
    let start = tail.find(START)? + START.len();
    let end = tail.rfind(END)?;
    (start <= end).then(|| &tail[start..end])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("field {0:?} has the wrong type")]
    InvalidField(String),
    #[error("unknown label {0:?}")]
    BadLabel(String),
    #[error("confidence {0} outside 1..=5")]
    ConfidenceOutOfRange(i64),
    #[error("unknown knowledge level {0:?}")]
    BadLevel(String),
}

/// Byte span of the balanced `{...}` starting at `open`, honouring string escapes.
fn balanced_object(s: &str, open: usize) -> Option<&str> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[open..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas that directly precede `}` or `]` outside of strings.
fn strip_trailing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// First JSON object in `raw`, tolerating code fences, surrounding prose and trailing commas.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let mut from = 0;
    while let Some(rel) = raw[from..].find('{') {
        let open = from + rel;
        if let Some(candidate) = balanced_object(raw, open) {
            let parsed = serde_json::from_str::<Value>(candidate)
                .or_else(|_| serde_json::from_str::<Value>(&strip_trailing_commas(candidate)));
            if let Ok(Value::Object(map)) = parsed {
                return Some(map);
            }
        }
        from = open + 1;
    }
    None
}

fn required<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, ParseError> {
    match obj.get(name) {
        None | Some(Value::Null) => Err(ParseError::MissingField(name.to_string())),
        Some(v) => Ok(v),
    }
}

fn required_str<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a str, ParseError> {
    required(obj, name)?
        .as_str()
        .ok_or_else(|| ParseError::InvalidField(name.to_string()))
}

fn non_empty_str<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a str, ParseError> {
    let s = required_str(obj, name)?;
    if s.trim().is_empty() {
        return Err(ParseError::MissingField(name.to_string()));
    }
    Ok(s)
}

fn label_field(obj: &Map<String, Value>, name: &str) -> Result<ErrorLabel, ParseError> {
    let s = required_str(obj, name)?;
    s.parse().map_err(|_| ParseError::BadLabel(s.to_string()))
}

fn confidence_field(obj: &Map<String, Value>) -> Result<u8, ParseError> {
    let v = required(obj, "confidence")?;
    let n = if let Some(n) = v.as_i64() {
        n
    } else if let Some(f) = v.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 1e15) {
        f as i64
    } else if let Some(n) = v.as_u64() {
        // only reachable above i64::MAX
        return Err(ParseError::ConfidenceOutOfRange(n.min(i64::MAX as u64) as i64));
    } else {
        return Err(ParseError::InvalidField("confidence".into()));
    };
    if (1..=5).contains(&n) {
        Ok(n as u8)
    } else {
        Err(ParseError::ConfidenceOutOfRange(n))
    }
}

/// Parses the just-in-time output object. The result always has `degraded = false`.
pub fn parse_jit_response(raw: &str) -> Result<FeedbackResponse, ParseError> {
    let obj = extract_json_object(raw).ok_or(ParseError::NoJsonFound)?;
    let classification = label_field(&obj, "classification")?;
    let confidence = confidence_field(&obj)?;
    let secondary_classification = label_field(&obj, "secondary_classification")?;
    let feedback = non_empty_str(&obj, "feedback")?.to_string();
    let words = word_count(&feedback);
    if words > FEEDBACK_WARN_WORDS {
        tracing::warn!(words, "feedback longer than {FEEDBACK_WARN_WORDS} words");
    }
    Ok(FeedbackResponse {
        classification,
        confidence,
        secondary_classification,
        feedback,
        degraded: false,
    })
}

/// Canonical JSON for a response, in the shape the model is asked to emit.
pub fn render_jit_response(response: &FeedbackResponse) -> String {
    serde_json::json!({
        "classification": response.classification,
        "confidence": response.confidence,
        "secondary_classification": response.secondary_classification,
        "feedback": response.feedback,
    })
    .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeLevel {
    Novice,
    Advanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosthocFeedback {
    pub essay_evaluation: String,
    pub inferred_level: KnowledgeLevel,
    pub novice_feedback: String,
    pub advanced_feedback: String,
}

/// Parses the post-hoc output: `Essay_Evaluation`, `Inferred_Level` and `Feedback.{Novice, Advanced}`.
pub fn parse_posthoc_response(raw: &str) -> Result<PosthocFeedback, ParseError> {
    let obj = extract_json_object(raw).ok_or(ParseError::NoJsonFound)?;
    let essay_evaluation = required_str(&obj, "Essay_Evaluation")?.to_string();
    let level = required_str(&obj, "Inferred_Level")?;
    let inferred_level = match level.trim().to_ascii_lowercase().as_str() {
        "novice" => KnowledgeLevel::Novice,
        "advanced" => KnowledgeLevel::Advanced,
        _ => return Err(ParseError::BadLevel(level.to_string())),
    };
    let feedback = required(&obj, "Feedback")?
        .as_object()
        .ok_or_else(|| ParseError::InvalidField("Feedback".into()))?;
    let novice_feedback = non_empty_str(feedback, "Novice")
        .map_err(|e| nested("Feedback.Novice", e))?
        .to_string();
    let advanced_feedback = non_empty_str(feedback, "Advanced")
        .map_err(|e| nested("Feedback.Advanced", e))?
        .to_string();
    Ok(PosthocFeedback {
        essay_evaluation,
        inferred_level,
        novice_feedback,
        advanced_feedback,
    })
}

fn nested(path: &str, err: ParseError) -> ParseError {
    match err {
        ParseError::MissingField(_) => ParseError::MissingField(path.to_string()),
        ParseError::InvalidField(_) => ParseError::InvalidField(path.to_string()),
        other => other,
    }
}
