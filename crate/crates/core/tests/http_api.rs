use std::sync::Arc;

use axum::routing::post;
use axum::{Json, Router};
use jit_feedback::assets::{sample_bank, sample_quiz};
use jit_feedback::domain::{ErrorLabel, FeedbackResponse};
use jit_feedback::gateway::{
    CompletionBackend, CompletionParams, Gateway, GatewayConfig, HttpChatBackend, ScriptedBackend,
};
use jit_feedback::prompt::{render_jit_response, KnowledgeLevel, PosthocFeedback};
use jit_feedback::service::http::{serve, AppState};
use jit_feedback::service::{EventLog, ServiceOptions, SessionService};
use jit_feedback::sim::sim_backend;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

const TOKEN: &str = "s3cret";

struct Server {
    base: String,
    client: reqwest::Client,
    service: Arc<SessionService>,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(backend: ScriptedBackend, token: Option<&str>) -> Self {
        let gateway = Arc::new(Gateway::new(Arc::new(backend), GatewayConfig::unthrottled()).unwrap());
        let service = Arc::new(
            SessionService::new(
                vec![sample_quiz()],
                sample_bank(),
                gateway,
                EventLog::in_memory(),
                ServiceOptions::default(),
            )
            .unwrap(),
        );
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(serve(
            listener,
            AppState::new(service.clone(), token.map(String::from)),
            async {
                let _ = rx.await;
            },
        ));
        Server {
            base,
            client: reqwest::Client::new(),
            service,
            stop: Some(tx),
            handle,
        }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn admin_get(&self, path: &str, token: Option<&str>) -> reqwest::Response {
        let mut req = self.client.get(format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        req.send().await.unwrap()
    }

    async fn session(&self, student: &str) -> String {
        let (status, body) = self
            .post(
                "/api/sessions",
                json!({"student_id": student, "quiz_id": "stacked-blocks"}),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED);
        body["session_id"].as_str().unwrap().to_string()
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.await.unwrap().unwrap();
    }
}

fn essay(words: usize) -> String {
    vec!["force"; words].join(" ")
}

fn posthoc(novice: &str, advanced: &str) -> PosthocFeedback {
    PosthocFeedback {
        essay_evaluation: "Reasonable start.".into(),
        inferred_level: KnowledgeLevel::Novice,
        novice_feedback: novice.into(),
        advanced_feedback: advanced.into(),
    }
}

#[tokio::test]
async fn student_flow_status_codes() {
    let srv = Server::start(sim_backend(), Some(TOKEN)).await;
    let (status, _) = srv.get("/healthz").await;
    assert_eq!(status, StatusCode::OK);

    let (status, body) = srv
        .post("/api/sessions", json!({"student_id": "u1", "quiz_id": "nope"}))
        .await;
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("UnknownQuiz"))
    );

    let id = srv.session("u1").await;
    let (status, body) = srv
        .post(&format!("/api/sessions/{id}/feedback"), json!({"essay": essay(49)}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "ValidationFailed");
    assert!(body["violations"].is_array());

    let (status, body) = srv
        .post(&format!("/api/sessions/{id}/feedback"), json!({"essay": essay(50)}))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["turn_index"], 1);
    assert!(!body["feedback"].as_str().unwrap().is_empty());

    let (status, body) = srv
        .post(
            &format!("/api/sessions/{id}/feedback"),
            json!({"essay": essay(60), "turn_index": 5}),
        )
        .await;
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::CONFLICT, Some("TurnConflict"))
    );

    let (status, body) = srv
        .post(
            &format!("/api/sessions/{id}/feedback"),
            json!({"essay": essay(60), "turn_index": 2}),
        )
        .await;
    assert_eq!((status, body["turn_index"].as_u64()), (StatusCode::OK, Some(2)));
    let (status, retry) = srv
        .post(
            &format!("/api/sessions/{id}/feedback"),
            json!({"essay": essay(60), "turn_index": 2}),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(retry, body);

    let (status, _) = srv
        .post(&format!("/api/sessions/{id}/survey"), json!({"helpful": true}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, body) = srv
        .post(&format!("/api/sessions/{id}/answer"), json!({"option_key": "Q"}))
        .await;
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("UnknownOption"))
    );
    let correct = sample_quiz().correct_option;
    let (status, body) = srv
        .post(&format!("/api/sessions/{id}/answer"), json!({"option_key": correct}))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"answer_correct": true}));
    let (status, _) = srv
        .post(&format!("/api/sessions/{id}/answer"), json!({"option_key": correct}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = srv
        .post(&format!("/api/sessions/{id}/feedback"), json!({"essay": essay(60)}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let survey = json!({"helpful": true, "reasons": ["specific"], "free_text": "clear hints"});
    let (status, body) = srv.post(&format!("/api/sessions/{id}/survey"), survey.clone()).await;
    assert_eq!((status, body), (StatusCode::OK, json!({"recorded": true})));
    let (status, _) = srv.post(&format!("/api/sessions/{id}/survey"), survey).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = srv
        .post("/api/sessions/ses_missing/feedback", json!({"essay": essay(60)}))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let turns = srv.service.admin_session(&id).await.unwrap().turns;
    assert_eq!(turns.len(), 2);
    assert!(turns[1].latency_since_prev_s.is_some());
    srv.stop().await;
}

#[tokio::test]
async fn admin_routes_require_the_token() {
    let srv = Server::start(sim_backend(), Some(TOKEN)).await;
    let id = srv.session("u2").await;
    srv.post(&format!("/api/sessions/{id}/feedback"), json!({"essay": essay(55)}))
        .await;

    let path = format!("/api/admin/sessions/{id}");
    assert_eq!(srv.admin_get(&path, None).await.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(
        srv.admin_get(&path, Some("wrong")).await.status(),
        StatusCode::UNAUTHORIZED
    );
    let resp = srv.admin_get(&path, Some(TOKEN)).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let session: Value = resp.json().await.unwrap();
    assert!(session["turns"][0]["response"]["classification"].is_string());

    let report = srv.admin_get("/api/admin/report?format=text", Some(TOKEN)).await;
    assert_eq!(report.status(), StatusCode::OK);
    assert!(report.text().await.unwrap().contains("Conversational instances"));
    let report: Value = srv
        .admin_get("/api/admin/report", Some(TOKEN))
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(report["conversation"]["total_instances"], 1);
    srv.stop().await;

    let open = Server::start(sim_backend(), None).await;
    assert_eq!(
        open.admin_get("/api/admin/report", Some(TOKEN)).await.status(),
        StatusCode::FORBIDDEN
    );
    open.stop().await;
}

#[tokio::test]
async fn preference_round_trip_and_balance() {
    let srv = Server::start(sim_backend(), Some(TOKEN)).await;
    let (status, body) = srv.get("/api/preference/hw1?student_id=nobody").await;
    assert_eq!(
        (status, body["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("NotGenerated"))
    );

    let n = 1000;
    let mut novice_first = 0;
    for i in 0..n {
        let student = format!("student-{i}");
        let resp = srv
            .client
            .post(format!("{}/api/admin/posthoc", srv.base))
            .bearer_auth(TOKEN)
            .json(&json!({"assignment_id": "hw1", "student_id": student, "feedback": posthoc("N", "V")}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::CREATED);
        let (status, pair) = srv.get(&format!("/api/preference/hw1?student_id={student}")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(pair.get("order_seed").is_none());
        if pair["variant_a"] == "N" {
            novice_first += 1;
        }
        if i < 20 {
            let (status, chosen) = srv
                .post(
                    "/api/preference/hw1/choice",
                    json!({"student_id": student, "chosen": "B", "reasons": ["shorter", "concrete"]}),
                )
                .await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(chosen["chosen"], "B");
            assert_eq!(chosen["reasons"], json!(["shorter", "concrete"]));
            let (_, again) = srv.get(&format!("/api/preference/hw1?student_id={student}")).await;
            assert_eq!(again, chosen);
            let (status, _) = srv
                .post(
                    "/api/preference/hw1/choice",
                    json!({"student_id": student, "chosen": "A"}),
                )
                .await;
            assert_eq!(status, StatusCode::CONFLICT);
        }
    }
    let rate = novice_first as f64 / n as f64;
    assert!((0.45..=0.55).contains(&rate), "novice-first rate {rate}");

    let state = srv.service.snapshot().unwrap();
    let chosen = state.preferences.values().filter(|p| p.chosen.is_some()).count();
    assert_eq!(chosen, 20);
    srv.stop().await;
}

#[tokio::test]
async fn busy_gateway_maps_to_429() {
    let backend = ScriptedBackend::new("slow")
        .with_responder(jit_feedback::sim::sim_responder())
        .with_latency(std::time::Duration::from_millis(300));
    let gateway = Arc::new(
        Gateway::new(
            Arc::new(backend),
            GatewayConfig {
                max_in_flight: 1,
                queue_capacity: 1,
                ..GatewayConfig::unthrottled()
            },
        )
        .unwrap(),
    );
    let service = Arc::new(
        SessionService::new(
            vec![sample_quiz()],
            sample_bank(),
            gateway,
            EventLog::in_memory(),
            ServiceOptions::default(),
        )
        .unwrap(),
    );
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(serve(listener, AppState::new(service.clone(), None), async {
        let _ = rx.await;
    }));
    let client = reqwest::Client::new();
    let mut tasks = Vec::new();
    for i in 0..6 {
        let id = service
            .create_session(&format!("b{i}"), "stacked-blocks")
            .await
            .unwrap()
            .session_id;
        let (client, url) = (client.clone(), format!("{base}/api/sessions/{id}/feedback"));
        tasks.push(tokio::spawn(async move {
            let resp = client
                .post(url)
                .json(&json!({"essay": essay(60)}))
                .send()
                .await
                .unwrap();
            (
                resp.status(),
                resp.headers()
                    .get("retry-after")
                    .map(|v| v.to_str().unwrap().to_string()),
            )
        }));
    }
    let mut busy = 0;
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            (StatusCode::OK, _) => ok += 1,
            (StatusCode::TOO_MANY_REQUESTS, Some(after)) => {
                assert_eq!(after, "1");
                busy += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(ok + busy, 6);
    assert!(busy >= 1 && ok >= 1, "ok {ok}, busy {busy}");
    let turns: usize = service.snapshot().unwrap().sessions.iter().map(|s| s.turns.len()).sum();
    assert_eq!(turns, ok);
    let _ = tx.send(());
    handle.await.unwrap().unwrap();
}

async fn mock_chat(Json(req): Json<Value>) -> Json<Value> {
    let prompt = req["messages"][0]["content"].as_str().unwrap_or_default();
    assert!(!prompt.is_empty());
    let content = render_jit_response(&FeedbackResponse {
        classification: ErrorLabel::Direction,
        confidence: 4,
        secondary_classification: ErrorLabel::Correct,
        feedback: format!(
            "model={} temperature={}",
            req["model"].as_str().unwrap(),
            req["temperature"]
        ),
        degraded: false,
    });
    Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]}))
}

#[tokio::test]
async fn http_chat_backend_against_a_mock_server() {
    let app = Router::new()
        .route("/v1/chat/completions", post(mock_chat))
        .route(
            "/broken",
            post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, "overloaded") }),
        )
        .route("/empty", post(|| async { Json(json!({"choices": []})) }));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let params = CompletionParams {
        max_tokens: 256,
        temperature: 0.0,
        idempotency_key: "k1".into(),
    };
    let backend = HttpChatBackend::new(format!("http://{addr}/v1/chat/completions"), "tiny").with_api_key("key");
    let text = backend.complete("classify this", &params).await.unwrap();
    let parsed = jit_feedback::prompt::parse_jit_response(&text).unwrap();
    assert_eq!(parsed.classification, ErrorLabel::Direction);
    assert_eq!(parsed.feedback, "model=tiny temperature=0.0");

    let broken = HttpChatBackend::new(format!("http://{addr}/broken"), "tiny");
    let err = broken.complete("x", &params).await.unwrap_err();
    assert!(err.to_string().contains("503"), "{err}");
    let empty = HttpChatBackend::new(format!("http://{addr}/empty"), "tiny");
    assert!(empty.complete("x", &params).await.is_err());
    server.abort();
}
