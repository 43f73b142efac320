//! HTTP service for the blind rating study.
//!
//! Rater-facing routes never mention method names: tasks carry opaque image
//! tokens and ids. Results and the raw export need the operator token.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bokeh_core::study::{Study, SCALE_LABELS};
use bokeh_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

pub const TOKEN_ENV: &str = "BOKEH_OPERATOR_TOKEN";
pub const TOKEN_HEADER: &str = "x-operator-token";

#[derive(Clone)]
pub struct AppState {
    study: Arc<Study>,
    operator_token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(study: Arc<Study>, operator_token: Option<String>) -> Self {
        let operator_token = operator_token.filter(|t| !t.is_empty()).map(Arc::from);
        Self { study, operator_token }
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match self.0.root() {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            e if e.is_validation() => (StatusCode::BAD_REQUEST, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        (status, Json(json!({"error": kind, "message": self.0.to_string()}))).into_response()
    }
}

fn status_error(status: StatusCode, kind: &str, message: &str) -> Response {
    (status, Json(json!({"error": kind, "message": message}))).into_response()
}

type ApiResult<T> = Result<T, ApiError>;

fn check_study(state: &AppState, id: &str) -> ApiResult<()> {
    if id == state.study.id() {
        Ok(())
    } else {
        Err(Error::NotFound(format!("study {id}")).into())
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Accepts `Authorization: Bearer <t>` or `X-Operator-Token: <t>`.
fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    let Some(expected) = state.operator_token.as_deref() else {
        return Err(status_error(StatusCode::FORBIDDEN, "forbidden", "no operator token configured"));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .or_else(|| headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()));
    match given {
        Some(t) if constant_time_eq(t.as_bytes(), expected.as_bytes()) => Ok(()),
        _ => Err(status_error(StatusCode::UNAUTHORIZED, "unauthorized", "operator token required")),
    }
}

async fn info(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    check_study(&s, &id)?;
    let cfg = s.study.config();
    Ok(Json(json!({
        "study_id": cfg.study_id,
        "total": cfg.method_dirs.len() * cfg.image_ids.len(),
        "scale": SCALE_LABELS,
    })))
}

#[derive(Deserialize)]
struct TaskQuery {
    session: Option<String>,
}

async fn next_task(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TaskQuery>,
) -> ApiResult<Response> {
    check_study(&s, &id)?;
    let session = q.session.ok_or_else(|| Error::Validation("session query parameter is required".into()))?;
    let study = s.study.clone();
    let task = tokio::task::spawn_blocking(move || study.next_task(&session))
        .await
        .map_err(|e| Error::Runner(e.to_string()))??;
    Ok(no_store(Json(task).into_response()))
}

#[derive(Deserialize)]
struct RatingBody {
    session_id: String,
    task_id: String,
    level: Value,
}

async fn submit(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    check_study(&s, &id)?;
    let body: RatingBody =
        serde_json::from_slice(&body).map_err(|e| Error::Validation(format!("malformed rating body: {e}")))?;
    let level = body
        .level
        .as_i64()
        .ok_or_else(|| Error::Validation(format!("level must be an integer 1-5, got {}", body.level)))?;
    let study = s.study.clone();
    // the log append fsyncs, keep it off the async workers
    let ack = tokio::task::spawn_blocking(move || study.submit_rating(&body.session_id, &body.task_id, level))
        .await
        .map_err(|e| Error::Runner(e.to_string()))??;
    Ok(no_store(Json(ack).into_response()))
}

async fn results(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    if let Err(e) = check_study(&s, &id) {
        return e.into_response();
    }
    if let Err(r) = authorize(&s, &headers) {
        return r;
    }
    no_store(Json(s.study.aggregate_mos()).into_response())
}

async fn export(State(s): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    if let Err(e) = check_study(&s, &id) {
        return e.into_response();
    }
    if let Err(r) = authorize(&s, &headers) {
        return r;
    }
    let mut buf = Vec::new();
    if let Err(e) = s.study.export_ratings(&mut buf) {
        return ApiError(e).into_response();
    }
    no_store(([(header::CONTENT_TYPE, "application/x-ndjson")], buf).into_response())
}

async fn image(State(s): State<AppState>, Path(token): Path<String>) -> Response {
    let Some(path) = s.study.image_path(&token).map(PathBuf::from) else {
        return status_error(StatusCode::NOT_FOUND, "not_found", "unknown image");
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => (
            [
                (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
                (header::CACHE_CONTROL, HeaderValue::from_static("private, max-age=3600")),
            ],
            Body::from(bytes),
        )
            .into_response(),
        Err(e) => {
            log::error!("reading {}: {e}", path.display());
            status_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", "image unavailable")
        }
    }
}

fn no_store(mut r: Response) -> Response {
    r.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    r
}

/// API routes plus, if given, the rating UI bundle served from `ui_dir`.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/study/{id}", get(info))
        .route("/api/study/{id}/task", get(next_task))
        .route("/api/study/{id}/rating", post(submit))
        .route("/api/study/{id}/results", get(results))
        .route("/api/study/{id}/export", get(export))
        .route("/img/{token}", get(image))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until ctrl-c. `on_bound` receives the actual
/// address, which matters when the port is 0.
pub async fn serve(
    state: AppState,
    ui_dir: Option<PathBuf>,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
