//! HTTP/SSE service exposing sessions of one loaded program.

use std::convert::Infallible;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use adl_core::analyzer::{analyze, provenance_name, AnalysisReport};
use adl_core::runtime::{Runtime, RuntimeError, Session, TraceEvent};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

pub const DEFAULT_MAX_SESSIONS: usize = 1000;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_STRATEGY: &str = "proactive";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub max_sessions: usize,
    pub idle_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_sessions: DEFAULT_MAX_SESSIONS,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

struct Entry {
    session: Mutex<Session>,
    events: broadcast::Sender<TraceEvent>,
    last_used: Mutex<Instant>,
}

impl Entry {
    fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }
}

pub struct AppState {
    runtime: Arc<Runtime>,
    sessions: Mutex<LruCache<String, Arc<Entry>>>,
    config: ServerConfig,
    analysis: AnalysisReport,
}

impl AppState {
    pub fn new(runtime: Arc<Runtime>, config: ServerConfig) -> Arc<Self> {
        let cap = NonZeroUsize::new(config.max_sessions.max(1)).expect("non-zero capacity");
        let host = runtime.tool_schemas();
        let analysis = analyze(runtime.program(), host);
        Arc::new(Self {
            runtime,
            sessions: Mutex::new(LruCache::new(cap)),
            config,
            analysis,
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn expire_idle(&self) {
        let mut sessions = self.sessions.lock().unwrap();
        let stale: Vec<String> = sessions
            .iter()
            .filter(|(_, e)| e.last_used.lock().unwrap().elapsed() >= self.config.idle_timeout)
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            sessions.pop(&id);
        }
    }

    fn lookup(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.expire_idle();
        let entry = self
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))?;
        entry.touch();
        Ok(entry)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "E_NO_SESSION", format!("no session `{id}`"))
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        let status = match e.code.as_str() {
            "E_STRATEGY_UNKNOWN" => StatusCode::BAD_REQUEST,
            "E_TERMINATED" => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, &e.code, e.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": {"code": self.code, "message": self.message}})),
        )
            .into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "E_BAD_REQUEST", e.to_string()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    strategy: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostMessage {
    text: Option<String>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let strategy = req.strategy.unwrap_or_else(|| DEFAULT_STRATEGY.to_string());
    let rt = Arc::clone(&app.runtime);
    let session = tokio::task::spawn_blocking(move || rt.create_session(&strategy))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "E_INTERNAL", e.to_string()))??;
    let id = uuid::Uuid::new_v4().to_string();
    let greeting = session.greeting().to_vec();
    let (events, _) = broadcast::channel(1024);
    let entry = Arc::new(Entry {
        session: Mutex::new(session),
        events,
        last_used: Mutex::new(Instant::now()),
    });
    app.expire_idle();
    app.sessions.lock().unwrap().put(id.clone(), entry);
    Ok((StatusCode::CREATED, Json(json!({"id": id, "greeting": greeting}))))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: PostMessage = parse_body(&body)?;
    let Some(text) = req.text else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "E_BAD_REQUEST", "missing field `text`"));
    };
    let entry = app.lookup(&id)?;
    let result = tokio::task::spawn_blocking(move || {
        let mut session = entry.session.lock().unwrap();
        let result = session.post_user_message(&text);
        if let Ok(r) = &result {
            for e in &r.trace {
                let _ = entry.events.send(e.clone());
            }
        }
        result
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "E_INTERNAL", e.to_string()))??;
    Ok(Json(json!({
        "bot": result.bot_messages,
        "terminated": result.terminated,
        "trace": result.trace,
        "metrics": {
            "token_cost": result.metrics.token_cost,
            "latency_ms": result.metrics.latency_ms,
            "provider_calls": result.metrics.provider_calls,
        },
    })))
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let entry = app.lookup(&id)?;
    let snapshot = entry.session.lock().unwrap().get_state();
    Ok(Json(serde_json::to_value(snapshot).expect("state serializes")))
}

/// `{diagnostics, cycles:[{nodes, bounded, provenance}]}`.
pub fn analysis_json(report: &AnalysisReport) -> Value {
    json!({
        "diagnostics": report.diagnostics,
        "cycles": report.cycles.iter().map(|c| json!({
            "nodes": c.nodes,
            "bounded": c.bounded,
            "provenance": c.provenance.iter().map(|p| provenance_name(*p)).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

async fn get_program(State(app): State<Arc<AppState>>) -> Json<Value> {
    let agents: Vec<Value> = app
        .runtime
        .program()
        .agents
        .values()
        .map(|a| json!({"name": a.name, "type": a.kind().type_name(), "description": a.description()}))
        .collect();
    Json(json!({"agents": agents, "graph": analysis_json(&app.analysis)}))
}

fn sse_event(e: &TraceEvent) -> Result<Event, Infallible> {
    Ok(Event::default().data(serde_json::to_string(e).expect("trace events serialize")))
}

async fn events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let entry = app.lookup(&id)?;
    // Snapshot and subscribe under the session lock.
    let (past, rx) = {
        let session = entry.session.lock().unwrap();
        (session.trace().to_vec(), entry.events.subscribe())
    };
    let replay = tokio_stream::iter(past.iter().map(sse_event).collect::<Vec<_>>());
    let live = BroadcastStream::new(rx).filter_map(|r| r.ok().map(|e| sse_event(&e)));
    Ok(Sse::new(replay.chain(live)).keep_alive(KeepAlive::default()))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "E_NOT_FOUND", "no such endpoint")
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/state", get(get_state))
        .route("/api/program", get(get_program))
        .route("/api/events/{id}", get(events))
        .fallback(fallback)
        .with_state(app)
}

/// Serves until the shutdown future resolves; idle sessions are swept every few seconds.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = Arc::clone(&app);
    let period = app.config.idle_timeout.min(Duration::from_secs(5)).max(Duration::from_millis(100));
    let sweep = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.expire_idle();
        }
    });
    let result = axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await;
    sweep.abort();
    result
}
