//! HTTP JSON API.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::SurveyError;
use crate::service::SurveyService;

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for SurveyError {
    fn into_response(self) -> Response {
        let status = match &self {
            SurveyError::NotFound(_) => StatusCode::NOT_FOUND,
            SurveyError::Conflict(_) | SurveyError::Incomplete(_) => StatusCode::CONFLICT,
            SurveyError::Invalid(_) => StatusCode::BAD_REQUEST,
            SurveyError::PoolDeficit(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, SurveyError>;

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub participant_token: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct PostResponse {
    pub item_id: String,
    pub selected: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Default, Deserialize)]
pub struct ScoreQuery {
    #[serde(default)]
    pub partial: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct CohortQuery {
    /// Comma-separated session ids; all completed sessions if absent.
    #[serde(default)]
    pub sessions: Option<String>,
}

pub fn router(service: Arc<SurveyService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/responses", post(post_response))
        .route("/sessions/{id}/score", get(score))
        .route("/reports/cohort", get(cohort))
        .route("/images/{item_id}", get(image))
        .route("/config", get(client_config))
        .with_state(service)
}

/// Settings a browser client needs; no ground truth.
#[derive(Debug, Serialize)]
struct ClientConfig {
    deck_size: usize,
    time_limit_ms: u64,
    /// Extra time to answer after the image is hidden.
    decision_window_ms: u64,
}

async fn client_config(State(svc): State<Arc<SurveyService>>) -> Json<ClientConfig> {
    let cfg = svc.deck_config();
    Json(ClientConfig {
        deck_size: cfg.total(),
        time_limit_ms: cfg.time_limit_ms,
        decision_window_ms: 2000,
    })
}

async fn create_session(State(svc): State<Arc<SurveyService>>, Json(req): Json<CreateSession>) -> ApiResult<Response> {
    let created = svc.create_session(&req.participant_token, req.seed)?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn next_item(State(svc): State<Arc<SurveyService>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.next_item(&id)?).into_response())
}

async fn post_response(
    State(svc): State<Arc<SurveyService>>,
    Path(id): Path<String>,
    Json(req): Json<PostResponse>,
) -> ApiResult<Response> {
    let ack = svc.record_response(&id, &req.item_id, req.selected, req.duration_ms)?;
    Ok((StatusCode::CREATED, Json(ack)).into_response())
}

async fn score(
    State(svc): State<Arc<SurveyService>>,
    Path(id): Path<String>,
    Query(q): Query<ScoreQuery>,
) -> ApiResult<Response> {
    Ok(Json(svc.score(&id, q.partial)?).into_response())
}

async fn cohort(State(svc): State<Arc<SurveyService>>, Query(q): Query<CohortQuery>) -> ApiResult<Response> {
    let ids: Option<Vec<String>> = q
        .sessions
        .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect());
    Ok(Json(svc.cohort(ids.as_deref())?).into_response())
}

async fn image(State(svc): State<Arc<SurveyService>>, Path(item_id): Path<String>) -> ApiResult<Response> {
    let img = svc
        .image(&item_id)
        .ok_or_else(|| SurveyError::NotFound(format!("image {item_id}")))?;
    let path = img
        .path
        .clone()
        .ok_or_else(|| SurveyError::NotFound(format!("image {item_id} has no file")))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| SurveyError::io(&path, e))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<SurveyService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("survey service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
