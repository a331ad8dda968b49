mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chartlint::engine::{Engine, EngineConfig};
use chartlint::http::{router, ServeConfig};
use chartlint_core::correction::StubExecutor;
use chartlint_core::gateway::{FnTransport, Gateway, GatewayConfig, ModelRequest, ProviderConfig};
use common::{chart, replay_engine, scripted_transport};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Body,
    content_type: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        uri,
        Body::from(body.to_string()),
        Some("application/json"),
    )
    .await
}

async fn post(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "POST", uri, Body::empty(), None).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, Body::empty(), None).await
}

fn multipart(bytes: &[u8]) -> (Body, String) {
    let boundary = "chartlint-test-boundary";
    let mut body = Vec::new();
    body.extend_from_slice(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"chart.png\"\r\nContent-Type: image/png\r\n\r\n").as_bytes());
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    (
        Body::from(body),
        format!("multipart/form-data; boundary={boundary}"),
    )
}

fn app(engine: Engine, config: ServeConfig) -> Router {
    router(Arc::new(engine), config)
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or("")
}

#[tokio::test]
async fn replayed_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(replay_engine(dir.path()), ServeConfig::default());
    let (body, ct) = multipart(&chart("many_segment_pie.png"));
    let (status, session) = call(&app, "POST", "/sessions", body, Some(&ct)).await;
    assert_eq!(status, StatusCode::CREATED, "{session}");
    let id = session["session_id"].as_str().unwrap().to_string();

    let (status, report) = post(&app, &format!("/sessions/{id}/analyze")).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["merged_findings"].as_array().unwrap().len(), 3);
    let (status, again) = get(&app, &format!("/sessions/{id}/report")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["merged_findings"], report["merged_findings"]);

    let (status, corrected) = post(&app, &format!("/sessions/{id}/correct")).await;
    assert_eq!(status, StatusCode::OK, "{corrected}");
    assert_eq!(corrected["versions"].as_array().unwrap().len(), 2);

    let (status, refined) = post_json(
        &app,
        &format!("/sessions/{id}/chat"),
        json!({ "message": "Use a horizontal bar chart sorted by share." }),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{refined}");
    assert_eq!(refined["version_no"], 2);
    assert_eq!(refined["trigger"], "chat_refinement");

    let (status, versions) = get(&app, &format!("/sessions/{id}/versions")).await;
    assert_eq!(status, StatusCode::OK);
    let key = versions["versions"]["gpt"][1]["rendered_image"]["blob"]["key"]
        .as_str()
        .unwrap();
    assert_eq!(versions["versions"]["gpt"][1]["image_status"], "available");
    let resp = app
        .clone()
        .oneshot(
            Request::get(format!("/blobs/{key}"))
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "image/png");

    let (status, flag) = post_json(
        &app,
        &format!("/sessions/{id}/flags"),
        json!({ "name": "Unlabeled Percentages", "explanation": "Slices carry no share labels." }),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{flag}");
    let flag_id = flag["flag_id"].as_str().unwrap();
    let (status, approved) = post(&app, &format!("/flags/{flag_id}/approve")).await;
    assert_eq!(status, StatusCode::OK, "{approved}");
    assert_eq!(approved["catalog_version"], 2);

    let (status, relearned) = post(&app, &format!("/sessions/{id}/analyze")).await;
    assert_eq!(status, StatusCode::OK, "{relearned}");
    let names: Vec<&str> = relearned["merged_findings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"Unlabeled Percentages"), "{names:?}");

    let (_, audit) = get(&app, "/audit").await;
    assert_eq!(audit.as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn error_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(replay_engine(dir.path()), ServeConfig::default());

    let (status, body) = get(&app, "/sessions/s-nope/report").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "NotFound");
    assert!(body["error"]["message"].is_string());

    let (status, body) = post(&app, "/flags/f-nope/approve").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "NotFound");

    let (status, body) = get(&app, "/no/such/route").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "NotFound");

    let (status, body) = call(
        &app,
        "POST",
        "/sessions",
        Body::from("garbage"),
        Some("image/png"),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "ValidationError");

    let (_, session) = call(
        &app,
        "POST",
        "/sessions",
        Body::from(chart("clean_bar.png")),
        Some("image/png"),
    )
    .await;
    let id = session["session_id"].as_str().unwrap();
    let (status, body) = get(&app, &format!("/sessions/{id}/report")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "Conflict");
    let (status, body) = post(&app, &format!("/sessions/{id}/correct")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "Conflict");

    let (status, body) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/chat"),
        Body::from("{not json"),
        Some("application/json"),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "ValidationError");
}

#[tokio::test]
async fn replay_miss_is_upstream_error() {
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::replay(GatewayConfig::dual_default(), Default::default());
    let engine = Engine::open(
        dir.path(),
        Arc::new(gateway),
        Arc::new(StubExecutor),
        EngineConfig::default(),
    )
    .unwrap();
    let app = app(engine, ServeConfig::default());
    let (_, session) = call(
        &app,
        "POST",
        "/sessions",
        Body::from(chart("clean_bar.png")),
        None,
    )
    .await;
    let id = session["session_id"].as_str().unwrap();
    let (status, body) = post(&app, &format!("/sessions/{id}/analyze")).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(error_code(&body), "UpstreamModelError");
}

#[tokio::test]
async fn api_key_guards_everything_but_health() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServeConfig {
        api_key: Some("sekrit".into()),
        ..ServeConfig::default()
    };
    let app = app(replay_engine(dir.path()), config);
    let (status, body) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["gateway_mode"], "replay");
    let (status, _) = get(&app, "/openapi.json").await;
    assert_eq!(status, StatusCode::OK);

    let (status, body) = get(&app, "/flags").await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(error_code(&body), "Unauthorized");

    let resp = app
        .clone()
        .oneshot(
            Request::get("/flags")
                .header("x-api-key", "sekrit")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn openapi_lists_environment() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(replay_engine(dir.path()), ServeConfig::default());
    let (_, doc) = get(&app, "/openapi.json").await;
    for var in [
        "ANTHROPIC_API_KEY",
        "OPENAI_API_KEY",
        "CHARTLINT_FIXTURES",
        "CHARTLINT_DATA_DIR",
        "CHARTLINT_BIND",
    ] {
        assert!(doc["x-environment"][var].is_string(), "{var}");
    }
    for path in [
        "/sessions",
        "/sessions/{id}/analyze",
        "/flags/{id}/approve",
        "/health",
    ] {
        assert!(doc["paths"][path].is_object(), "{path}");
    }
}

#[tokio::test]
async fn slow_live_calls_become_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let inner = scripted_transport();
    let slow = FnTransport(move |p: &ProviderConfig, r: &ModelRequest| {
        std::thread::sleep(Duration::from_millis(40));
        inner.send(p, r)
    });
    let gateway = Gateway::live(GatewayConfig::dual_default(), Arc::new(slow));
    let engine = Engine::open(
        dir.path(),
        Arc::new(gateway),
        Arc::new(StubExecutor),
        EngineConfig::default(),
    )
    .unwrap();
    let config = ServeConfig {
        async_after: Duration::from_millis(20),
        ..ServeConfig::default()
    };
    let app = app(engine, config);
    let (_, session) = call(
        &app,
        "POST",
        "/sessions",
        Body::from(chart("truncated_bar.png")),
        None,
    )
    .await;
    let id = session["session_id"].as_str().unwrap();

    let (status, job) = post(&app, &format!("/sessions/{id}/analyze")).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let poll = job["poll_url"].as_str().unwrap().to_string();
    let mut done = None;
    for _ in 0..200 {
        let (status, body) = get(&app, &poll).await;
        if body["status"] != "running" {
            done = Some((status, body));
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    let (status, report) = done.expect("job finished");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["merged_findings"].as_array().unwrap().len(), 2);

    let (status, _) = get(&app, "/jobs/j-unknown").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
