//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::domain::{validate_essay, ConversationTurn, ErrorLabel, FeedbackResponse, StrategyEssay};
use jit_feedback::prompt::{build_jit_prompt, build_posthoc_prompt, LabelMode};
use jit_feedback::service::{Event, EventLog};

pub const GOLDEN_ESSAY: &str = "I will treat both blocks as one system to get the common acceleration from the applied force and the total mass. \
Then I will draw a free body diagram for the top block alone, because the force between the blocks is the only horizontal force on it. \
That force equals the top mass times the acceleration, and the reaction on the bottom block points the other way.";

pub const GOLDEN_RUBRIC: &str = "Find the shared acceleration from the applied force and the combined mass. \
Isolate the top block: the bottom block supplies its only horizontal force, equal to the top mass times the acceleration. \
By the third law the top block pushes on the bottom block with the same magnitude, directed opposite to the applied force.";

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// (file name, rendered prompt) for every golden prompt.
pub fn golden_prompts() -> Vec<(&'static str, String)> {
    let quiz = sample_quiz();
    let bank = sample_bank();
    let essay = validate_essay(GOLDEN_ESSAY, 0).expect("golden essay is valid");
    vec![
        (
            "jit_k0.txt",
            build_jit_prompt(&quiz, &essay, &bank, 0, LabelMode::WithSecondary)
                .unwrap()
                .text,
        ),
        (
            "jit_k3.txt",
            build_jit_prompt(&quiz, &essay, &bank, 3, LabelMode::WithSecondary)
                .unwrap()
                .text,
        ),
        (
            "posthoc.txt",
            build_posthoc_prompt(&quiz, &essay, GOLDEN_RUBRIC).unwrap().text,
        ),
    ]
}

fn turn(index: u32, label: ErrorLabel, words: usize, at_ms: i64, prev_ms: Option<i64>) -> ConversationTurn {
    ConversationTurn {
        turn_index: index,
        essay: StrategyEssay::new(vec!["plan"; words].join(" "), at_ms),
        response: FeedbackResponse {
            classification: label,
            confidence: 3,
            secondary_classification: label,
            feedback: "Check your plan.".into(),
            degraded: false,
        },
        latency_since_prev_s: prev_ms.map(|p| (at_ms - p) as f64 / 1000.0),
    }
}

/// Appends a complete session with the given per-turn labels and final answer.
pub fn append_session(log: &EventLog, id: &str, labels: &[ErrorLabel], answer_correct: Option<bool>) {
    let base = 1_700_000_000_000i64;
    log.append(
        base,
        Event::SessionCreated {
            session_id: id.to_string(),
            student_ref: format!("stu_{id}"),
            quiz_id: "stacked-blocks".into(),
        },
    )
    .unwrap();
    let mut prev = None;
    for (i, l) in labels.iter().enumerate() {
        let at = base + i as i64 * 60_000;
        log.append(
            at,
            Event::TurnRecorded {
                session_id: id.to_string(),
                turn: turn(i as u32 + 1, *l, 50 + 5 * i, at, prev),
            },
        )
        .unwrap();
        prev = Some(at);
    }
    if let Some(correct) = answer_correct {
        let (key, label) = if correct {
            ("A", ErrorLabel::Correct)
        } else {
            ("B", ErrorLabel::Direction)
        };
        log.append(
            base + 3_600_000,
            Event::AnswerRecorded {
                session_id: id.to_string(),
                option_key: key.into(),
                answer_correct: correct,
                answer_label: label,
            },
        )
        .unwrap();
    }
}
