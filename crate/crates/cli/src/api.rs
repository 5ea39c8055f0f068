//! HTTP binding of the orchestration service.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use buglife_core::hil::TaskId;
use buglife_core::model::{ArtifactKind, CaseId, Role};
use buglife_core::service::{DecisionRequest, ReportSubmission, Service, ServiceError};
use buglife_core::sim::SimConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = json!({ "error": self.0.kind(), "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(|t| t.trim().to_string())
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(ServiceError::InvalidConfig(msg.into()))
}

/// Service calls may block on remote agents, so they run off the reactor.
async fn blocking<T, F>(svc: &Arc<Service>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| bad_request(format!("worker failed: {e}")))?
        .map_err(ApiError)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/bugs", post(submit))
        .route("/bugs/{id}", get(get_case))
        .route("/bugs/{id}/dialogue", post(dialogue))
        .route("/bugs/{id}/timeline", get(timeline))
        .route("/bugs/{id}/artifacts/{kind}", get(artifact))
        .route("/tasks", get(tasks))
        .route("/tasks/{id}/decision", post(decision))
        .route("/simulate", post(simulate))
        .with_state(service)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn submit(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Json(body): Json<ReportSubmission>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    let view = blocking(&svc, move |s| s.submit_report(token.as_deref(), &body)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Deserialize)]
pub struct DialogueBody {
    pub answer: String,
}

async fn dialogue(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<DialogueBody>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    let view = blocking(&svc, move |s| {
        s.dialogue_turn(token.as_deref(), &CaseId::new(id), &body.answer)
    })
    .await?;
    Ok(Json(view))
}

async fn get_case(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    Ok(Json(svc.get_case(token.as_deref(), &CaseId::new(id))?))
}

async fn timeline(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    Ok(Json(svc.get_timeline(token.as_deref(), &CaseId::new(id))?))
}

#[derive(Deserialize)]
pub struct VersionQuery {
    pub version: Option<u32>,
}

/// Artifact body as served over HTTP; content is returned as text.
#[derive(Serialize)]
pub struct ArtifactView {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub version: u32,
    pub producer: buglife_core::model::Principal,
    pub content: String,
    pub content_hash: String,
    pub created_at: u64,
}

async fn artifact(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path((id, kind)): Path<(String, String)>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    let kind: ArtifactKind = serde_json::from_value(json!(kind))
        .map_err(|_| ApiError(ServiceError::NotFound(format!("artifact kind {kind}"))))?;
    let record = svc.get_artifact(token.as_deref(), &CaseId::new(id), kind, q.version)?;
    Ok(Json(ArtifactView {
        artifact_id: record.artifact_id.clone(),
        kind: record.kind,
        version: record.version,
        producer: record.producer.clone(),
        content: record.content_str().to_string(),
        content_hash: record.content_hash.clone(),
        created_at: record.created_at,
    }))
}

#[derive(Deserialize)]
pub struct RoleQuery {
    pub role: String,
}

async fn tasks(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Query(q): Query<RoleQuery>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    let role = Role::parse(&q.role).ok_or_else(|| bad_request(format!("unknown role {}", q.role)))?;
    Ok(Json(svc.list_tasks(token.as_deref(), role)?))
}

async fn decision(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(id): Path<TaskId>,
    Json(body): Json<DecisionRequest>,
) -> ApiResult<impl IntoResponse> {
    let token = bearer(&headers);
    let view = blocking(&svc, move |s| s.post_decision(token.as_deref(), id, &body)).await?;
    Ok(Json(view))
}

async fn simulate(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Json(config): Json<SimConfig>,
) -> ApiResult<impl IntoResponse> {
    svc.authenticate(bearer(&headers).as_deref())?;
    let metrics = blocking(&svc, move |s| s.run_simulation(&config)).await?;
    Ok(Json(metrics))
}
