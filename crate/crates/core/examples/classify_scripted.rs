//! Classifies essays through the gateway with a scripted backend, including the
//! re-ask on malformed output and the fallback when the backend keeps failing.

use std::sync::Arc;

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::classifier::{classify, ClassificationStrategy, RequestSettings};
use jit_feedback::domain::{validate_essay, ErrorLabel, FeedbackResponse};
use jit_feedback::gateway::{Gateway, GatewayConfig, ScriptRule, ScriptedBackend};
use jit_feedback::prompt::render_jit_response;

#[tokio::main]
async fn main() {
    let good = render_jit_response(&FeedbackResponse {
        classification: ErrorLabel::Direction,
        confidence: 4,
        secondary_classification: ErrorLabel::Correct,
        feedback: "Which way does friction on the top block point while the pair speeds up?".into(),
        degraded: false,
    });
    let backend = ScriptedBackend::new("demo")
        .with_rule(ScriptRule::key_prefix("malformed#reask", good.clone()))
        .with_rule(ScriptRule::key_prefix("malformed", "Sorry, I cannot answer in JSON."))
        .with_rule(ScriptRule::key_prefix("down", "").failing())
        .with_default_response(good);
    let gateway = Gateway::new(Arc::new(backend), GatewayConfig::unthrottled()).expect("valid config");

    let essay =
        validate_essay(&"I will find the net force on both blocks together first ".repeat(6), 0).expect("long enough");
    let quiz = sample_quiz();
    let bank = sample_bank();
    let strategy = ClassificationStrategy::few_shot(1, true);
    let settings = RequestSettings::default();

    for key in ["clean", "malformed", "down"] {
        let r = classify(&essay, &quiz, &bank, &strategy, &gateway, &settings, key)
            .await
            .expect("gateway has room");
        println!(
            "{key:>9}: {} (secondary {}, confidence {}, degraded {})\n           {}",
            r.classification, r.secondary_classification, r.confidence, r.degraded, r.feedback
        );
    }
    println!("{:?}", gateway.stats());
}
