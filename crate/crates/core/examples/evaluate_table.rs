//! Evaluates all four prompting strategies and the lexical baseline on a
//! synthetic labeled dataset and prints the comparison table. The offline
//! lexical backend ignores the prompt, so every strategy row matches; point the
//! `eval` command at an http backend to compare real models.

use std::sync::Arc;

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::classifier::{
    evaluate, evaluate_baseline, ClassificationStrategy, LabeledDataset, LabeledItem, RequestSettings,
};
use jit_feedback::classifier::{render_table, LexicalBackend};
use jit_feedback::domain::ErrorLabel;
use jit_feedback::gateway::{Gateway, GatewayConfig};
use jit_feedback::sim::synthesize_essay;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[tokio::main]
async fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let items = (0..80)
        .map(|i| {
            let label = ErrorLabel::ALL[i % 4];
            LabeledItem {
                essay_text: synthesize_essay(label, 60 + i % 25, &mut rng),
                gold_label: label,
            }
        })
        .collect();
    let dataset = LabeledDataset::new(items).expect("non-empty");
    let bank = sample_bank();
    let quiz = sample_quiz();
    let gateway = Gateway::new(
        Arc::new(LexicalBackend::new(&bank).expect("bank")),
        GatewayConfig::unthrottled(),
    )
    .expect("config");

    let strategies = [
        ClassificationStrategy::zero_shot(false),
        ClassificationStrategy::zero_shot(true),
        ClassificationStrategy::few_shot(2, false),
        ClassificationStrategy::few_shot(2, true),
    ];
    let mut rows = Vec::new();
    for s in &strategies {
        let report = evaluate(&dataset, &quiz, s, &bank, &gateway, &RequestSettings::default(), 3)
            .await
            .expect("evaluation");
        rows.push((s.display_name(), report));
    }
    rows.push((
        "Lexical baseline".to_string(),
        evaluate_baseline(&dataset, &bank).expect("baseline"),
    ));
    print!("{}", render_table(&rows));
}
