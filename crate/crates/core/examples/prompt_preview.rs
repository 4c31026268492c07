//! Prints the zero-shot and few-shot classification prompts for one essay.
//!
//! ```text
//! cargo run --example prompt_preview -- "My strategy is to ..."
//! ```

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::domain::validate_essay;
use jit_feedback::prompt::{build_jit_prompt, LabelMode};

fn main() {
    let text = std::env::args().nth(1).unwrap_or_else(|| {
        "I would draw a free body diagram of the top block only. Gravity pulls it down with its own weight, \
         the normal force from the bottom block pushes it up, and friction from the bottom block acts \
         horizontally. Because the top block accelerates with the pair, friction must point in the direction \
         of the applied force, so I can set friction equal to the top mass times the shared acceleration."
            .to_string()
    });
    let essay = match validate_essay(&text, 0) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("essay rejected: {e}");
            std::process::exit(1);
        }
    };
    let quiz = sample_quiz();
    let bank = sample_bank();
    for k in [0, 1] {
        let prompt = build_jit_prompt(&quiz, &essay, &bank, k, LabelMode::WithSecondary).expect("bank covers k=1");
        println!("===== k_per_label = {k} ({} bytes) =====", prompt.text.len());
        println!("{}", prompt.text);
    }
}
