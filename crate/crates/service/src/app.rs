//! HTTP API. Engine calls block, so handlers hop onto the blocking pool;
//! sessions created here run to completion in the background.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evoflow_core::bench::{self, EngineRunner, RunReport, SyntheticAgent};
use evoflow_core::events::Delivery;
use evoflow_core::orchestrator::EngineError;
use evoflow_core::session::{GateFlags, HumanFeedback, SessionConfig, SessionStatus};
use evoflow_core::templates::DistillOutcome;
use evoflow_core::tools::ToolError;
use evoflow_core::trials::TrialBudget;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::runtime::Runtime;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: Value::Null }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} {id:?}"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message, "detail": self.detail}))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            EngineError::UnknownSession(_) => (StatusCode::NOT_FOUND, "not_found"),
            EngineError::State { .. } | EngineError::Precondition(_) => (StatusCode::CONFLICT, "conflict"),
            EngineError::Provider(_) | EngineError::Parse { .. } => (StatusCode::BAD_GATEWAY, "upstream"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let retryable = e.is_retryable();
        ApiError::new(status, code, e.to_string()).with_detail(json!({"retryable": retryable}))
    }
}

impl From<ToolError> for ApiError {
    fn from(e: ToolError) -> Self {
        let (status, code) = match &e {
            ToolError::Unknown(_) => (StatusCode::NOT_FOUND, "not_found"),
            ToolError::NotDraft(..) | ToolError::Gated { .. } => (StatusCode::CONFLICT, "conflict"),
            ToolError::NoTestCases(_) | ToolError::Invalid(_) | ToolError::Schema { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Body parsing with the structured error shape instead of axum's plain text.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.is_empty() { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| {
        if e.is_data() {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", format!("invalid request: {e}"))
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("invalid JSON body: {e}"))
        }
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Debug, Clone)]
enum BenchRun {
    Running,
    Done(Box<RunReport>),
    Failed(String),
}

pub struct AppState {
    pub runtime: Runtime,
    runs: Mutex<BTreeMap<String, BenchRun>>,
}

impl AppState {
    pub fn new(runtime: Runtime) -> Arc<Self> {
        Arc::new(Self { runtime, runs: Mutex::new(BTreeMap::new()) })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/tools", get(list_tools))
        .route("/tools/{id}", get(get_tool))
        .route("/tools/{id}/validate", post(validate_tool))
        .route("/templates", get(list_templates))
        .route("/bench/runs", post(start_bench))
        .route("/bench/runs/{id}", get(get_bench))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    goal: String,
    #[serde(default)]
    max_iterations: Option<u32>,
    #[serde(default)]
    gates: Option<GateFlags>,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse_body(&body)?;
    let base = st.runtime.config.session_config();
    let config = SessionConfig {
        max_iterations: req.max_iterations.unwrap_or(base.max_iterations),
        gates: req.gates.unwrap_or(base.gates),
    };
    let engine = st.runtime.engine.clone();
    let session = blocking(move || Ok(engine.create_session(&req.goal, config)?)).await?;
    let id = session.id.clone();
    let bg = st.clone();
    tokio::task::spawn_blocking(move || {
        let engine = &bg.runtime.engine;
        if let Ok(done) = engine.run_to_completion(&id, None) {
            if done.status == SessionStatus::Succeeded {
                engine.templates().distill(&done, DistillOutcome::OpenEnded);
            }
        }
        let _ = bg.runtime.persist();
    });
    Ok((StatusCode::CREATED, Json(json!({"id": session.id, "status": session.status}))))
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let engine = st.runtime.engine.clone();
    blocking(move || {
        let rows = engine
            .session_ids()
            .into_iter()
            .filter_map(|id| engine.session(&id).ok())
            .map(|s| json!({"id": s.id, "goal": s.goal, "status": s.status, "iteration_count": s.iteration_count}))
            .collect::<Vec<_>>();
        Ok(Json(Value::Array(rows)))
    })
    .await
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let engine = st.runtime.engine.clone();
    blocking(move || {
        let s = engine.session(&id)?;
        let mut v = serde_json::to_value(&s).map_err(|e| ApiError::internal(e.to_string()))?;
        v["state_hash"] = json!(s.state_hash());
        Ok(Json(v))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: Option<u64>,
}

/// Server-sent events: catch-up from `from`, then live, then a final `end`
/// event once the session's stream is closed.
async fn session_events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Sse<impl futures::Stream<Item = Result<SseEvent, Infallible>>>> {
    let engine = st.runtime.engine.clone();
    if !engine.session_ids().contains(&id) {
        return Err(ApiError::not_found("session", &id));
    }
    let mut sub = engine.store().subscribe(&id, q.from.unwrap_or(1));
    let (tx, rx) = tokio::sync::mpsc::channel::<SseEvent>(64);
    std::thread::spawn(move || loop {
        match sub.next_timeout(Duration::from_millis(250)) {
            Delivery::Event(e) => {
                let data = serde_json::to_string(&e).unwrap_or_default();
                let ev = SseEvent::default().id(e.global_seq.to_string()).event(e.kind.clone()).data(data);
                if tx.blocking_send(ev).is_err() {
                    break;
                }
            }
            Delivery::End => {
                let _ = tx.blocking_send(SseEvent::default().event("end").data("{}"));
                break;
            }
            Delivery::Idle if tx.is_closed() => break,
            Delivery::Idle => {}
        }
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok(e), rx)) });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn post_feedback(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let feedback: HumanFeedback = parse_body(&body)?;
    let engine = st.runtime.engine.clone();
    let ack = blocking(move || Ok(engine.inject_feedback(&id, feedback)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"seq": ack.seq, "status": ack.status}))))
}

async fn list_tools(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::to_value(st.runtime.engine.tools().list()).unwrap_or_default())
}

async fn get_tool(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tool = st.runtime.engine.tools().find_by_name(&id).ok_or_else(|| ApiError::not_found("tool", &id))?;
    Ok(Json(serde_json::to_value(tool).unwrap_or_default()))
}

async fn validate_tool(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let bg = st.clone();
    blocking(move || {
        let tools = bg.runtime.engine.tools();
        let tool = tools.find_by_name(&id).ok_or_else(|| ApiError::not_found("tool", &id))?;
        let report = tools.validate(&tool.id)?;
        bg.runtime.persist().map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Json(serde_json::to_value(report).unwrap_or_default()))
    })
    .await
}

async fn list_templates(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::to_value(st.runtime.engine.templates().list()).unwrap_or_default())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AgentKind {
    Synthetic,
    #[default]
    Engine,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartBench {
    dataset: PathBuf,
    #[serde(default = "one")]
    budget: u32,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    fraction: Option<f64>,
    #[serde(default)]
    agent: AgentKind,
    #[serde(default)]
    p: Option<f64>,
}

fn one() -> u32 {
    1
}

async fn start_bench(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: StartBench = parse_body(&body)?;
    let invalid = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", m);
    let budget = TrialBudget::new(req.budget).map_err(|e| invalid(e.to_string()))?;
    let seed = req.seed.unwrap_or(st.runtime.config.seeds.bench);
    let dataset = req.dataset.clone();
    let mut items = blocking(move || {
        bench::load_dataset(&dataset).map_err(|e| invalid(e.to_string()).with_detail(json!({"dataset": dataset})))
    })
    .await?;
    if let Some(f) = req.fraction {
        items = bench::sample_subset(&items, f, seed).map_err(|e| invalid(e.to_string()))?;
    }
    let p = req.p.unwrap_or(0.6);
    if req.agent == AgentKind::Synthetic && !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p must be in [0, 1], got {p}")));
    }
    let run_id = {
        let mut runs = st.runs.lock().unwrap();
        let id = format!("run-{:06}", runs.len() + 1);
        runs.insert(id.clone(), BenchRun::Running);
        id
    };
    let bg = st.clone();
    let rid = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let result = match req.agent {
            AgentKind::Synthetic => bench::evaluate(&mut SyntheticAgent { p }, &items, budget, seed).map_err(|e| e.to_string()),
            AgentKind::Engine => match bg.runtime.bench_engine() {
                Ok(engine) => {
                    let mut runner = EngineRunner { engine, config: bg.runtime.config.session_config() };
                    bench::evaluate(&mut runner, &items, budget, seed).map_err(|e| e.to_string())
                }
                Err(e) => Err(e.to_string()),
            },
        };
        let state = match result {
            Ok(r) => BenchRun::Done(Box::new(r)),
            Err(e) => BenchRun::Failed(e),
        };
        bg.runs.lock().unwrap().insert(rid, state);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"run_id": run_id}))))
}

async fn get_bench(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = st.runs.lock().unwrap().get(&id).cloned().ok_or_else(|| ApiError::not_found("bench run", &id))?;
    Ok(match run {
        BenchRun::Running => (StatusCode::ACCEPTED, Json(json!({"run_id": id, "status": "running"}))).into_response(),
        BenchRun::Done(report) => Json(*report).into_response(),
        BenchRun::Failed(e) => ApiError::internal(e).with_detail(json!({"run_id": id})).into_response(),
    })
}

/// Serves until the process is stopped.
pub async fn serve(runtime: Runtime, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(runtime))).await?;
    Ok(())
}
