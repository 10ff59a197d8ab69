use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use adl_cli::server::{router, AppState, ServerConfig};
use adl_core::provider::{ProviderSet, ScriptedProvider, ScriptedRules};
use adl_core::runtime::{Runtime, RuntimeOptions, TraceEvent};
use adl_core::tools::FixtureHost;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn bookstore() -> Arc<Runtime> {
    let program = adl_core::load_program(&corpus("bookstore/bookstore.yaml")).unwrap().program.unwrap();
    let rules = ScriptedRules::load(&corpus("bookstore/rules.yaml")).unwrap();
    Arc::new(
        Runtime::new(
            program,
            ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
            Some(Arc::new(FixtureHost::load(&corpus("bookstore/tools.json")).unwrap())),
            RuntimeOptions::default(),
        )
        .unwrap(),
    )
}

fn app(config: ServerConfig) -> (Arc<AppState>, axum::Router) {
    let state = AppState::new(bookstore(), config);
    (Arc::clone(&state), router(state))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn new_session(app: &axum::Router) -> String {
    let (status, body) = call(app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["id"].as_str().unwrap().to_string()
}

fn order_flow() -> Vec<&'static str> {
    vec![
        "I'd like to place an order for a book.",
        "Do you have other types of books?",
        "I don't have anything else I want to buy.",
    ]
}

#[tokio::test]
async fn session_lifecycle() {
    let (_, app) = app(ServerConfig::default());
    let (status, body) = call(&app, "POST", "/api/sessions", Some(json!({"strategy": "merging"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["greeting"], json!(["Hi, I'm your bookstore assistant. How can I help you?"]));
    let id = body["id"].as_str().unwrap();

    let (status, reply) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/messages"),
        Some(json!({"text": "I'd like to place an order for a book."})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["bot"][0], "I'll place the order for you.");
    assert_eq!(reply["terminated"], false);
    for key in ["token_cost", "latency_ms", "provider_calls"] {
        assert!(reply["metrics"][key].is_u64(), "{key}");
    }

    let (status, state) = call(&app, "GET", &format!("/api/sessions/{id}/state"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["active_agent"], "order");
    assert_eq!(state["stack"], json!(["main", "triage", "order"]));
}

#[tokio::test]
async fn errors_are_json() {
    let (_, app) = app(ServerConfig::default());
    let (status, body) = call(&app, "GET", "/api/sessions/nope/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "E_NO_SESSION");
    let (status, _) = call(&app, "POST", "/api/sessions/nope/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/events/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "POST", "/api/sessions", Some(json!({"strategy": "greedy"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "E_STRATEGY_UNKNOWN");

    let id = new_session(&app).await;
    let (status, body) = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "E_BAD_REQUEST");

    let (status, body) = call(&app, "GET", "/api/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "E_NOT_FOUND");
}

#[tokio::test]
async fn trace_slices_hold_exactly_their_turn() {
    let (_, app) = app(ServerConfig::default());
    let id = new_session(&app).await;
    let mut slices = Vec::new();
    for (i, text) in order_flow().into_iter().enumerate() {
        let (_, reply) = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": text}))).await;
        let slice: Vec<TraceEvent> = serde_json::from_value(reply["trace"].clone()).unwrap();
        assert!(!slice.is_empty());
        assert!(slice.iter().all(|e| e.turn == i as u32 + 1));
        slices.push(slice);
    }

    // The event stream replays the whole trace; each slice is exactly its turn's events.
    let req = Request::builder().uri(format!("/api/events/{id}")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    let mut buf = String::new();
    let mut all: Vec<TraceEvent> = Vec::new();
    let wanted_after_greeting: usize = slices.iter().map(Vec::len).sum();
    while all.iter().filter(|e| e.turn > 0).count() < wanted_after_greeting {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        while let Some(end) = buf.find("\n\n") {
            let chunk: String = buf.drain(..end + 2).collect();
            if let Some(data) = chunk.lines().find_map(|l| l.strip_prefix("data: ")) {
                all.push(serde_json::from_str(data).unwrap());
            }
        }
    }
    assert!(all.windows(2).all(|w| w[0].seq < w[1].seq));
    for (i, slice) in slices.iter().enumerate() {
        let turn: Vec<&TraceEvent> = all.iter().filter(|e| e.turn == i as u32 + 1).collect();
        assert_eq!(turn, slice.iter().collect::<Vec<_>>());
    }
}

#[tokio::test]
async fn events_stream_live() {
    let (_, app) = app(ServerConfig::default());
    let id = new_session(&app).await;
    let req = Request::builder().uri(format!("/api/events/{id}")).body(Body::empty()).unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();
    let (_, reply) = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": "What is your return policy?"}))).await;
    let last_seq = reply["trace"].as_array().unwrap().last().unwrap()["seq"].clone();
    let mut text = String::new();
    while !text.contains(&format!("\"seq\":{last_seq},")) {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
}

#[tokio::test]
async fn least_recently_used_sessions_are_evicted() {
    let (state, app) = app(ServerConfig {
        max_sessions: 2,
        ..ServerConfig::default()
    });
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    // touch `a` so `b` becomes the eviction candidate
    assert_eq!(call(&app, "GET", &format!("/api/sessions/{a}/state"), None).await.0, StatusCode::OK);
    let _c = new_session(&app).await;
    assert_eq!(state.session_count(), 2);
    assert_eq!(call(&app, "GET", &format!("/api/sessions/{a}/state"), None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", &format!("/api/sessions/{b}/state"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (_, app) = app(ServerConfig {
        idle_timeout: Duration::from_millis(50),
        ..ServerConfig::default()
    });
    let id = new_session(&app).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(call(&app, "GET", &format!("/api/sessions/{id}/state"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn program_endpoint() {
    let (_, app) = app(ServerConfig::default());
    let (status, body) = call(&app, "GET", "/api/program", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = body["agents"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["triage", "main", "order", "store_policy_kb", "book_recommendation"]);
    assert_eq!(body["agents"][0]["type"], "ensemble agent");
    assert_eq!(body["graph"]["cycles"], json!([]));
    assert!(body["graph"]["diagnostics"].is_array());
}

#[tokio::test]
async fn terminated_session_conflicts() {
    let program = adl_core::load_program(&corpus("tools/caller.yaml")).unwrap().program.unwrap();
    let rules = ScriptedRules::load(&corpus("bench/synthetic/rules.yaml")).unwrap();
    let rt = Runtime::new(
        program,
        ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
        Some(Arc::new(FixtureHost::load(&corpus("tools/custom_function.json")).unwrap())),
        RuntimeOptions::default(),
    )
    .unwrap();
    let app = router(AppState::new(Arc::new(rt), ServerConfig::default()));
    let id = new_session(&app).await;
    let mut last = Value::Null;
    for text in ["go", "thanks"] {
        last = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": text}))).await.1;
    }
    assert_eq!(last["terminated"], true);
    let (status, body) = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": "hello?"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "E_TERMINATED");
}

#[tokio::test]
async fn api_transcript_matches_the_repl() {
    let (_, app) = app(ServerConfig::default());
    let id = new_session(&app).await;
    for text in order_flow() {
        call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({"text": text}))).await;
    }
    let (_, state) = call(&app, "GET", &format!("/api/sessions/{id}/state"), None).await;
    let entries: Vec<adl_core::runtime::TranscriptEntry> = serde_json::from_value(state["transcript"].clone()).unwrap();
    let api = adl_core::runtime::render_transcript(&entries);

    let input = order_flow().join("\n") + "\n";
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = adl_cli::run(
        [
            "adl",
            "run",
            corpus("bookstore/bookstore.yaml").to_str().unwrap(),
            "--provider",
            &format!("scripted:{}", corpus("bookstore/rules.yaml").display()),
            "--tool-fixture",
            corpus("bookstore/tools.json").to_str().unwrap(),
        ],
        &mut input.as_bytes(),
        false,
        &mut out,
        &mut err,
    );
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    assert_eq!(String::from_utf8(out).unwrap(), api);
}
