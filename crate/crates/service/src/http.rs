//! HTTP+JSON surface over the engine.
//!
//! Errors use the envelope `{"error": {"code", "message"}}`. When a live
//! gateway takes longer than `async_after` on analyze, correct or chat, the
//! call returns 202 with a poll URL under `/jobs/{id}`; replay-mode calls
//! always complete synchronously.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::Engine;
use crate::error::{ApiError, ErrorCode};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Required in `x-api-key` when set.
    pub api_key: Option<String>,
    pub async_after: Duration,
    pub max_upload_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            api_key: None,
            async_after: Duration::from_secs(10),
            max_upload_bytes: 20 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
enum Job {
    Running,
    Done(u16, Value),
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    config: Arc<ServeConfig>,
    jobs: Arc<Mutex<HashMap<String, Job>>>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.http_status())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.envelope())).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(status: StatusCode, value: T) -> ApiResult {
    let body = serde_json::to_value(value).map_err(|e| ApiError::storage(e.to_string()))?;
    Ok((status, Json(body)).into_response())
}

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::storage(format!("worker failed: {e}")))?
}

fn settle(result: Result<Result<Value, ApiError>, tokio::task::JoinError>) -> (u16, Value) {
    match result {
        Ok(Ok(v)) => (200, v),
        Ok(Err(e)) => (e.code.http_status(), e.envelope()),
        Err(e) => {
            let e = ApiError::storage(format!("worker failed: {e}"));
            (e.code.http_status(), e.envelope())
        }
    }
}

fn response(status: u16, body: Value) -> Response {
    (
        StatusCode::from_u16(status).unwrap_or(StatusCode::OK),
        Json(body),
    )
        .into_response()
}

/// Runs a model-bound call, switching to a pollable job when a live call
/// outlasts the configured threshold.
async fn long_running<T, F>(state: &AppState, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let engine = state.engine.clone();
    let replay = engine.gateway().is_replay();
    let mut handle = tokio::task::spawn_blocking(move || {
        f(&engine)
            .and_then(|v| serde_json::to_value(v).map_err(|e| ApiError::storage(e.to_string())))
    });
    if replay {
        let (status, body) = settle(handle.await);
        return response(status, body);
    }
    match tokio::time::timeout(state.config.async_after, &mut handle).await {
        Ok(result) => {
            let (status, body) = settle(result);
            response(status, body)
        }
        Err(_) => {
            let n: u64 = rand::rng().random();
            let job_id = format!("j-{n:016x}");
            state.jobs.lock().insert(job_id.clone(), Job::Running);
            let jobs = state.jobs.clone();
            let id = job_id.clone();
            tokio::spawn(async move {
                let (status, body) = settle(handle.await);
                jobs.lock().insert(id, Job::Done(status, body));
            });
            response(
                202,
                json!({ "job_id": job_id, "status": "running", "poll_url": format!("/jobs/{job_id}") }),
            )
        }
    }
}

async fn require_key(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let open = matches!(req.uri().path(), "/health" | "/openapi.json");
    if let (Some(expected), false) = (&state.config.api_key, open) {
        let given = req.headers().get("x-api-key").and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(ErrorCode::Unauthorized, "missing or wrong x-api-key")
                .into_response();
        }
    }
    next.run(req).await
}

fn is_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

/// First file (or only) field of a multipart body, or the raw body.
async fn upload_bytes(req: Request) -> Result<Vec<u8>, ApiError> {
    if is_multipart(req.headers()) {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::validation(e.to_string()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::validation(e.to_string()))?
        {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::validation(e.to_string()))?;
            if !bytes.is_empty() {
                return Ok(bytes.to_vec());
            }
        }
        return Err(ApiError::validation("multipart body has no file field"));
    }
    let bytes = Bytes::from_request(req, &())
        .await
        .map_err(|e| ApiError::validation(e.to_string()))?;
    if bytes.is_empty() {
        return Err(ApiError::validation("empty upload"));
    }
    Ok(bytes.to_vec())
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::validation(e.body_text()))
}

#[derive(Debug, Deserialize)]
struct ChatBody {
    message: String,
    #[serde(default)]
    provider: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FlagBody {
    name: String,
    #[serde(default)]
    explanation: String,
}

async fn health(State(state): State<AppState>) -> ApiResult {
    ok(
        StatusCode::OK,
        json!({
            "status": "ok",
            "gateway_mode": state.engine.gateway().mode(),
            "catalog_version": state.engine.catalog().version,
        }),
    )
}

async fn create_session(State(state): State<AppState>, req: Request) -> ApiResult {
    let bytes = upload_bytes(req).await?;
    let view = blocking(&state, move |e| e.create_session(&bytes)).await?;
    ok(StatusCode::CREATED, view)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.session(&id)).await?,
    )
}

async fn analyze(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    long_running(&state, move |e| e.analyze(&id)).await
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.report(&id)).await?,
    )
}

async fn dataset(State(state): State<AppState>, Path(id): Path<String>, req: Request) -> ApiResult {
    let bytes = upload_bytes(req).await?;
    let text =
        String::from_utf8(bytes).map_err(|_| ApiError::validation("dataset is not UTF-8 text"))?;
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.upload_dataset(&id, &text)).await?,
    )
}

async fn correct(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    long_running(&state, move |e| e.correct(&id)).await
}

async fn chat(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ChatBody>, JsonRejection>,
) -> Response {
    let body = match json_body(body) {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    long_running(&state, move |e| {
        e.chat(&id, &body.message, body.provider.as_deref())
    })
    .await
}

async fn versions(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.versions(&id)).await?,
    )
}

async fn flag(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<FlagBody>, JsonRejection>,
) -> ApiResult {
    let body = json_body(body)?;
    ok(
        StatusCode::CREATED,
        blocking(&state, move |e| e.flag(&id, &body.name, &body.explanation)).await?,
    )
}

async fn list_flags(State(state): State<AppState>) -> ApiResult {
    ok(StatusCode::OK, blocking(&state, |e| e.flags()).await?)
}

async fn approve(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.approve(&id)).await?,
    )
}

async fn reject(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, move |e| e.reject(&id)).await?,
    )
}

async fn catalog(State(state): State<AppState>) -> ApiResult {
    ok(StatusCode::OK, state.engine.catalog_info())
}

async fn audit(State(state): State<AppState>) -> ApiResult {
    ok(
        StatusCode::OK,
        blocking(&state, |e| e.audit_events()).await?,
    )
}

async fn blob(
    State(state): State<AppState>,
    Path(key): Path<String>,
) -> Result<Response, ApiError> {
    let bytes = blocking(&state, move |e| e.blob(&key)).await?;
    let kind = if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else {
        "application/octet-stream"
    };
    Ok(([(header::CONTENT_TYPE, kind)], bytes).into_response())
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.jobs.lock().get(&id).cloned() {
        None => ApiError::not_found(format!("job {id}")).into_response(),
        Some(Job::Running) => response(200, json!({ "job_id": id, "status": "running" })),
        Some(Job::Done(status, body)) => response(status, body),
    }
}

async fn openapi() -> Json<Value> {
    Json(openapi_document())
}

async fn fallback() -> ApiError {
    ApiError::not_found("route")
}

pub fn router(engine: Arc<Engine>, config: ServeConfig) -> Router {
    let limit = config.max_upload_bytes + 64 * 1024;
    let state = AppState {
        engine,
        config: Arc::new(config),
        jobs: Arc::new(Mutex::new(HashMap::new())),
    };
    Router::new()
        .route("/health", get(health))
        .route("/openapi.json", get(openapi))
        .route("/catalog", get(catalog))
        .route("/audit", get(audit))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/analyze", post(analyze))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/dataset", post(dataset))
        .route("/sessions/{id}/correct", post(correct))
        .route("/sessions/{id}/chat", post(chat))
        .route("/sessions/{id}/versions", get(versions))
        .route("/sessions/{id}/flags", post(flag))
        .route("/flags", get(list_flags))
        .route("/flags/{id}/approve", post(approve))
        .route("/flags/{id}/reject", post(reject))
        .route("/blobs/{key}", get(blob))
        .route("/jobs/{id}", get(job))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(state.clone(), require_key))
        .with_state(state)
}

pub async fn serve(router: Router, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await
}

fn op(summary: &str, request: Option<&str>, response: &str) -> Value {
    let mut v = json!({ "summary": summary, "responses": { "200": { "description": response } } });
    if let Some(r) = request {
        v["requestBody"] = json!({ "description": r });
    }
    v
}

pub fn openapi_document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": { "title": "chartlint", "version": env!("CARGO_PKG_VERSION") },
        "x-error-envelope": {
            "shape": { "error": { "code": "string", "message": "string" } },
            "codes": {
                "NotFound": 404, "Conflict": 409, "UpstreamModelError": 502,
                "ValidationError": 422, "StorageFailure": 500, "Unauthorized": 401
            }
        },
        "x-environment": {
            "ANTHROPIC_API_KEY": "key for the claude provider (live mode)",
            "OPENAI_API_KEY": "key for the gpt provider (live mode)",
            "CHARTLINT_FIXTURES": "replay fixture directory; enables replay mode",
            "CHARTLINT_DATA_DIR": "root for sessions, blobs, audit log and learned issues",
            "CHARTLINT_BIND": "bind address for serve",
            "CHARTLINT_API_KEY": "when set, required in the x-api-key header"
        },
        "x-long-running": "analyze, correct and chat return 202 {job_id, poll_url} when a live call exceeds 10 s; poll GET /jobs/{id}",
        "paths": {
            "/health": { "get": op("liveness, gateway mode and catalog version", None, "status object") },
            "/catalog": { "get": op("catalog version and learned issues", None, "CatalogInfo") },
            "/audit": { "get": op("audit events in write order", None, "list of AuditEvent") },
            "/sessions": { "post": op("upload a chart image (multipart or raw PNG/JPEG body)", Some("image"), "SessionView (201)") },
            "/sessions/{id}": { "get": op("session status", None, "SessionView") },
            "/sessions/{id}/analyze": { "post": op("detect, explain and localize issues", None, "AnalysisReport") },
            "/sessions/{id}/report": { "get": op("latest analysis report; 409 while pending", None, "AnalysisReport") },
            "/sessions/{id}/dataset": { "post": op("upload a CSV dataset used by later corrections", Some("CSV text (multipart or raw)"), "DataTable") },
            "/sessions/{id}/correct": { "post": op("one corrected version per provider; 409 before analyze", None, "CorrectResponse") },
            "/sessions/{id}/chat": { "post": op("refine a provider's latest version", Some("{message, provider?}"), "VersionView") },
            "/sessions/{id}/versions": { "get": op("all versions per provider with image_status", None, "VersionsView") },
            "/sessions/{id}/flags": { "post": op("flag a user-identified issue", Some("{name, explanation}"), "FlagRecord (201)") },
            "/flags": { "get": op("all flags", None, "list of FlagRecord") },
            "/flags/{id}/approve": { "post": op("approve a flag; catalog version +1", None, "ApprovalResponse") },
            "/flags/{id}/reject": { "post": op("reject a flag; catalog unchanged", None, "FlagRecord") },
            "/blobs/{key}": { "get": op("stored image bytes", None, "image/png") },
            "/jobs/{id}": { "get": op("poll a long-running call", None, "running status or the final body") }
        }
    })
}
