//! JSON-over-HTTP front end for [`SessionService`].
//!
//! Student-facing routes only ever return feedback text, turn indices and
//! booleans. Full turn detail is behind the bearer-token admin routes.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use super::{Choice, ServiceError, SessionService};
use crate::analytics::{build_report, ReportOptions};
use crate::domain::SurveyResponse;
use crate::prompt::PosthocFeedback;

/// Seconds a client is asked to wait after a 429.
pub const RETRY_AFTER_S: u64 = 1;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<SessionService>,
    pub admin_token: Option<String>,
    pub report_options: ReportOptions,
}

impl AppState {
    pub fn new(service: Arc<SessionService>, admin_token: Option<String>) -> Self {
        Self {
            service,
            admin_token,
            report_options: ReportOptions::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    violations: Option<serde_json::Value>,
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use ServiceError as E;
        let (status, code) = match &self.0 {
            E::UnknownQuiz(_) => (StatusCode::NOT_FOUND, "UnknownQuiz"),
            E::UnknownSession(_) => (StatusCode::NOT_FOUND, "UnknownSession"),
            E::ValidationFailed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "ValidationFailed"),
            E::SessionClosed => (StatusCode::CONFLICT, "SessionClosed"),
            E::TurnConflict { .. } => (StatusCode::CONFLICT, "TurnConflict"),
            E::Busy => (StatusCode::TOO_MANY_REQUESTS, "Busy"),
            E::UnknownOption(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownOption"),
            E::AlreadyAnswered => (StatusCode::CONFLICT, "AlreadyAnswered"),
            E::NotAnswered => (StatusCode::CONFLICT, "NotAnswered"),
            E::DuplicateSurvey => (StatusCode::CONFLICT, "DuplicateSurvey"),
            E::NotGenerated => (StatusCode::NOT_FOUND, "NotGenerated"),
            E::AlreadyGenerated => (StatusCode::CONFLICT, "AlreadyGenerated"),
            E::AlreadyChosen => (StatusCode::CONFLICT, "AlreadyChosen"),
            E::PosthocFailed(_) => (StatusCode::BAD_GATEWAY, "PosthocFailed"),
            E::Prompt(_) | E::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        let violations = match &self.0 {
            E::ValidationFailed(v) => serde_json::to_value(&v.violations).ok(),
            _ => None,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = ErrorBody {
            error: code,
            message: self.0.to_string(),
            violations,
        };
        let mut resp = (status, Json(body)).into_response();
        if status == StatusCode::TOO_MANY_REQUESTS {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_S));
        }
        resp
    }
}

fn status_error(status: StatusCode, code: &'static str, message: &str) -> Response {
    (
        status,
        Json(ErrorBody {
            error: code,
            message: message.to_string(),
            violations: None,
        }),
    )
        .into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub student_id: String,
    pub quiz_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub essay: String,
    /// Turn the client believes it is submitting; makes retries safe.
    #[serde(default)]
    pub turn_index: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub option_key: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudentQuery {
    pub student_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChoiceRequest {
    pub student_id: String,
    pub chosen: Choice,
    #[serde(default)]
    pub reasons: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PosthocRegisterRequest {
    pub assignment_id: String,
    pub student_id: String,
    pub feedback: PosthocFeedback,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PosthocGenerateRequest {
    pub assignment_id: String,
    pub student_id: String,
    pub quiz_id: String,
    pub essay: String,
    pub expert_rubric: String,
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub format: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/feedback", post(submit_feedback))
        .route("/api/sessions/{id}/answer", post(record_answer))
        .route("/api/sessions/{id}/survey", post(record_survey))
        .route("/api/preference/{assignment_id}", get(get_preference))
        .route("/api/preference/{assignment_id}/choice", post(record_choice))
        .route("/api/admin/sessions/{id}", get(admin_session))
        .route("/api/admin/report", get(admin_report))
        .route("/api/admin/posthoc", post(admin_register_posthoc))
        .route("/api/admin/posthoc/generate", post(admin_generate_posthoc))
        .with_state(state)
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "events": st.service.log().len()}))
}

async fn create_session(
    State(st): State<AppState>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<Response, ApiError> {
    let out = st.service.create_session(&req.student_id, &req.quiz_id).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn submit_feedback(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<FeedbackRequest>,
) -> Result<Response, ApiError> {
    let out = st.service.submit_essay(&id, &req.essay, req.turn_index).await?;
    Ok(Json(out).into_response())
}

async fn record_answer(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<Response, ApiError> {
    let out = st.service.record_answer(&id, &req.option_key).await?;
    Ok(Json(out).into_response())
}

async fn record_survey(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SurveyResponse>,
) -> Result<Response, ApiError> {
    st.service.record_survey(&id, req).await?;
    Ok(Json(json!({"recorded": true})).into_response())
}

async fn get_preference(
    State(st): State<AppState>,
    Path(assignment_id): Path<String>,
    Query(q): Query<StudentQuery>,
) -> Result<Response, ApiError> {
    let pair = st.service.get_preference_pair(&assignment_id, &q.student_id).await?;
    Ok(Json(pair).into_response())
}

async fn record_choice(
    State(st): State<AppState>,
    Path(assignment_id): Path<String>,
    Json(req): Json<ChoiceRequest>,
) -> Result<Response, ApiError> {
    let pair = st
        .service
        .record_preference(&assignment_id, &req.student_id, req.chosen, req.reasons)
        .await?;
    Ok(Json(pair).into_response())
}

/// The rejection to send, if the request may not use admin routes.
fn reject_unauthorized(st: &AppState, headers: &HeaderMap) -> Option<Response> {
    let Some(token) = st.admin_token.as_deref() else {
        return Some(status_error(
            StatusCode::FORBIDDEN,
            "AdminDisabled",
            "no admin token configured",
        ));
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(p) if constant_time_eq(p.as_bytes(), token.as_bytes()) => None,
        _ => Some(status_error(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            "missing or invalid bearer token",
        )),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn admin_session(State(st): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    if let Some(r) = reject_unauthorized(&st, &headers) {
        return r;
    }
    match st.service.admin_session(&id).await {
        Ok(s) => Json(s).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn admin_report(State(st): State<AppState>, headers: HeaderMap, Query(q): Query<ReportQuery>) -> Response {
    if let Some(r) = reject_unauthorized(&st, &headers) {
        return r;
    }
    let records = st.service.log().snapshot();
    match build_report(&records, st.report_options) {
        Ok(report) => match q.format.as_deref() {
            Some("text") => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.to_text()).into_response(),
            _ => ([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response(),
        },
        Err(e) => status_error(StatusCode::UNPROCESSABLE_ENTITY, "ReportUnavailable", &e.to_string()),
    }
}

async fn admin_register_posthoc(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<PosthocRegisterRequest>,
) -> Response {
    if let Some(r) = reject_unauthorized(&st, &headers) {
        return r;
    }
    match st
        .service
        .register_posthoc(&req.assignment_id, &req.student_id, req.feedback)
        .await
    {
        Ok(()) => (StatusCode::CREATED, Json(json!({"registered": true}))).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn admin_generate_posthoc(
    State(st): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<PosthocGenerateRequest>,
) -> Response {
    if let Some(r) = reject_unauthorized(&st, &headers) {
        return r;
    }
    match st
        .service
        .generate_posthoc(
            &req.assignment_id,
            &req.student_id,
            &req.quiz_id,
            &req.essay,
            &req.expert_rubric,
        )
        .await
    {
        Ok(fb) => (StatusCode::CREATED, Json(fb)).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests and flushes the log.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let service = state.service.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    service.log().flush().map_err(|e| std::io::Error::other(e.to_string()))
}
