//! Runs the HTTP service on a local port with the offline lexical backend,
//! drives one student through it, then shuts down.

use std::sync::Arc;

use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::classifier::LexicalBackend;
use jit_feedback::gateway::{Gateway, GatewayConfig};
use jit_feedback::service::http::{serve, AppState};
use jit_feedback::service::{EventLog, ServiceOptions, SessionService};
use serde_json::{json, Value};

#[tokio::main]
async fn main() {
    let bank = sample_bank();
    let gateway = Arc::new(
        Gateway::new(
            Arc::new(LexicalBackend::new(&bank).expect("bank")),
            GatewayConfig::default(),
        )
        .expect("config"),
    );
    let service = Arc::new(
        SessionService::new(
            vec![sample_quiz()],
            bank,
            gateway,
            EventLog::in_memory(),
            ServiceOptions::default(),
        )
        .expect("service"),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let base = format!("http://{}", listener.local_addr().expect("addr"));
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(
        listener,
        AppState::new(service.clone(), Some("token".into())),
        async {
            let _ = stopped.await;
        },
    ));
    println!("listening on {base}");

    let http = reqwest::Client::new();
    let post = |path: String, body: Value| {
        let http = http.clone();
        async move {
            let resp = http.post(path).json(&body).send().await.expect("request");
            let status = resp.status();
            (status, resp.json::<Value>().await.expect("json body"))
        }
    };
    let (_, created) = post(
        format!("{base}/api/sessions"),
        json!({"student_id": "demo", "quiz_id": "stacked-blocks"}),
    )
    .await;
    let id = created["session_id"].as_str().expect("session id").to_string();
    let drafts = [
        "Too short to count.",
        "I would treat both blocks as one system and use the total mass with the applied force to get the shared \
         acceleration. Then I would isolate the top block, because only friction from the lower block acts on it \
         horizontally, and multiply its mass by that acceleration to get the friction force on the top block.",
    ];
    for draft in drafts {
        let (status, body) = post(format!("{base}/api/sessions/{id}/feedback"), json!({"essay": draft})).await;
        println!(
            "POST feedback -> {status}\n{}",
            serde_json::to_string_pretty(&body).expect("json")
        );
    }
    let (status, body) = post(format!("{base}/api/sessions/{id}/answer"), json!({"option_key": "A"})).await;
    println!("POST answer -> {status} {body}");

    let _ = stop.send(());
    server.await.expect("join").expect("serve");
    println!("{} events recorded", service.log().len());
}
