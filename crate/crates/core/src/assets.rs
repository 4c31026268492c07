//! Files shipped with the crate: prompt templates, the sample quiz and the
//! expert few-shot bank.

use crate::domain::{FewShotExample, QuizProblem};

pub const JIT_TEMPLATE: &str = include_str!("../assets/templates/jit_prompt.txt");
pub const JIT_SINGLE_LABEL_TEMPLATE: &str = include_str!("../assets/templates/jit_prompt_single_label.txt");
pub const POSTHOC_TEMPLATE: &str = include_str!("../assets/templates/posthoc_prompt.txt");

pub const QUIZZES_JSON: &str = include_str!("../assets/quizzes.json");
pub const BANK_JSONL: &str = include_str!("../assets/bank.jsonl");

/// The stacked-blocks quiz: A is correct, B/C/D map to direction, position
/// and position-direction errors.
pub fn sample_quiz() -> QuizProblem {
    sample_quizzes().remove(0)
}

pub fn sample_quizzes() -> Vec<QuizProblem> {
    serde_json::from_str(QUIZZES_JSON).expect("bundled quizzes.json is valid")
}

/// Twelve expert-annotated examples, three per label.
pub fn sample_bank() -> Vec<FewShotExample> {
    crate::io::parse_jsonl(BANK_JSONL).expect("bundled bank.jsonl is valid")
}
