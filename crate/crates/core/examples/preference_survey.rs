//! Generates post-hoc novice and advanced feedback through the gateway and
//! walks a few students through the blind preference survey.

use std::sync::Arc;

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::gateway::{Gateway, GatewayConfig, ScriptedBackend};
use jit_feedback::service::{Choice, EventLog, ServiceOptions, SessionService};
use serde_json::json;

const RUBRIC: &str =
    "Isolate the top block; friction on it points along the applied force; use the shared acceleration.";

#[tokio::main]
async fn main() {
    let reply = json!({
        "Essay_Evaluation": "The plan identifies the right system but leaves the friction direction implicit.",
        "Inferred_Level": "Novice",
        "Feedback": {
            "Novice": "Draw the top block by itself. Which way must friction push it so it speeds up with the bottom block?",
            "Advanced": "State the friction direction on the top block explicitly and tie it to the common acceleration."
        }
    })
    .to_string();
    let backend = ScriptedBackend::new("posthoc").with_default_response(reply);
    let gateway = Arc::new(Gateway::new(Arc::new(backend), GatewayConfig::unthrottled()).expect("config"));
    let service = SessionService::new(
        vec![sample_quiz()],
        sample_bank(),
        gateway,
        EventLog::in_memory(),
        ServiceOptions::default(),
    )
    .expect("service");
    let essay = "I would find the acceleration of both blocks together from the applied force and total mass, then \
                 look at the top block alone and use its mass times that acceleration for the friction force on it. \
                 Friction is the only horizontal force on the top block, so it must point the way the pair accelerates.";
    for (i, student) in ["ana", "ben", "chi", "dev"].iter().enumerate() {
        service
            .generate_posthoc("hw3", student, "stacked-blocks", essay, RUBRIC)
            .await
            .expect("generation");
        let pair = service.get_preference_pair("hw3", student).await.expect("pair");
        let choice = if i % 2 == 0 { Choice::A } else { Choice::B };
        let done = service
            .record_preference("hw3", student, choice, vec!["more concrete".into()])
            .await
            .expect("choice");
        println!(
            "{student}: A = {:.40}...\n     B = {:.40}...\n     chose {:?}",
            pair.variant_a,
            pair.variant_b,
            done.chosen.expect("recorded")
        );
    }
    let state = service.snapshot().expect("replay");
    for p in state.preferences.values() {
        let novice_first = p.order_seed.map(|s| s % 2 == 0);
        println!(
            "{} picked {:?} (novice shown first: {:?})",
            p.student_ref, p.chosen, novice_first
        );
    }
}
