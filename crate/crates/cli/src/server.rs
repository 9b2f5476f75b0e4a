//! The `/v1` HTTP service over one deployed product.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pailine::binding::{apply_startup_exclusions, register_from_bundle, BindingError};
use pailine::composer::{load_product, ComposeError};
use pailine::data::FieldPath;
use pailine::engine::{ChildExecution, Engine, EngineConfig, EngineError, IncidentAction, Resolution, TaskState};
use pailine::scenario::{self, CommercialRegisterStub, NotificationGatewayStub};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub product_dir: PathBuf,
    pub exclusions: Vec<(String, String)>,
    /// Overrides for the product's `retry.*` settings.
    pub retry_attempts: Option<u32>,
    pub retry_backoff: Option<Duration>,
    pub journal_dir: Option<PathBuf>,
    /// Contents of the stub commercial register.
    pub register: BTreeMap<String, String>,
}

impl ServiceConfig {
    pub fn new(product_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            product_dir: product_dir.into(),
            exclusions: Vec::new(),
            retry_attempts: None,
            retry_backoff: None,
            journal_dir: None,
            register: scenario::sample_register(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot load product: {0}")]
    Product(#[from] ComposeError),
    #[error("cannot register plugins: {0}")]
    Binding(#[from] BindingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot listen on {addr}: {source}")]
    Listen {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub gateway: Arc<NotificationGatewayStub>,
    pub register: Arc<CommercialRegisterStub>,
}

/// Build the engine for a product. Exclusions are applied here, once, and
/// the journal (if any) is replayed. Also returns exclusion warnings.
pub fn deploy(cfg: &ServiceConfig) -> Result<(AppState, Vec<String>), ServiceError> {
    let bundle = load_product(&cfg.product_dir)?;
    let excluded = apply_startup_exclusions(register_from_bundle(&bundle)?, &cfg.exclusions);
    let mut config = EngineConfig::from_product(&bundle.config)?;
    if let Some(n) = cfg.retry_attempts {
        if n == 0 {
            return Err(EngineError::Config("retry attempts must be at least 1".into()).into());
        }
        config.retry_attempts = n;
    }
    if let Some(d) = cfg.retry_backoff {
        config.retry_backoff = d;
    }
    config.children = ChildExecution::Threads;
    let register = Arc::new(CommercialRegisterStub::new(cfg.register.clone()));
    let gateway = Arc::new(NotificationGatewayStub::default());
    let mut engine = Engine::new(
        bundle,
        excluded.registry,
        scenario::handlers(register.clone(), gateway.clone()),
        config,
    )?;
    if let Some(dir) = &cfg.journal_dir {
        engine = engine.with_journal(dir)?;
        engine.resume_pending()?;
    }
    let state = AppState {
        engine: Arc::new(engine),
        gateway,
        register,
    };
    Ok((state, excluded.warnings))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/schema", get(schema))
        .route("/v1/instances", post(start_instance))
        .route("/v1/instances/{id}", get(get_instance))
        .route("/v1/tasks", get(list_tasks))
        .route("/v1/tasks/{id}/complete", post(complete_task))
        .route("/v1/variation-points/{vp}/plugins", get(list_plugins))
        .route("/v1/incidents", get(list_incidents))
        .route("/v1/incidents/{id}/resolve", post(resolve_incident))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let (state, warnings) = deploy(&cfg)?;
    for w in warnings {
        tracing::warn!("{w}");
    }
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .map_err(|source| ServiceError::Listen { addr: cfg.listen, source })?;
    tracing::info!(addr = %cfg.listen, product = %cfg.product_dir.display(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}

pub struct ApiError(StatusCode, String, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "bad_request".into(), msg.into())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use EngineError::*;
        let (status, kind) = match &e {
            UnknownDefinition(_) => (StatusCode::NOT_FOUND, "unknown_definition"),
            UnknownInstance(_) => (StatusCode::NOT_FOUND, "unknown_instance"),
            UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            UnknownIncident(_) => (StatusCode::NOT_FOUND, "unknown_incident"),
            TaskClosed(_) => (StatusCode::CONFLICT, "task_closed"),
            IncidentResolved(_) => (StatusCode::CONFLICT, "incident_resolved"),
            VersionConflict { .. } => (StatusCode::CONFLICT, "version_conflict"),
            UndeclaredOutput { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "undeclared_output"),
            Schema(_) => (StatusCode::UNPROCESSABLE_ENTITY, "schema"),
            SelectionNotAccepted { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "selection_not_accepted"),
            Binding(_) => (StatusCode::UNPROCESSABLE_ENTITY, "plugin_unavailable"),
            NotAChild(_) => (StatusCode::UNPROCESSABLE_ENTITY, "not_a_child"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, kind.into(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Engine calls may sleep between handler retries, so keep them off the
/// async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal".into(), e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    let processes: Vec<&str> = s.engine.product().core_processes().map(|p| p.id.as_str()).collect();
    Json(json!({"status": "ok", "processes": processes}))
}

/// Record definitions, for clients that render forms from the product.
async fn schema(State(s): State<AppState>) -> Json<Value> {
    Json(json!({"records": s.engine.product().data_schema}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRequest {
    definition_id: String,
    #[serde(default = "empty_object")]
    data: Value,
    #[serde(default)]
    selections: BTreeMap<String, BTreeSet<String>>,
}

fn empty_object() -> Value {
    json!({})
}

async fn start_instance(State(s): State<AppState>, Json(req): Json<StartRequest>) -> ApiResult {
    let engine = s.engine.clone();
    let (id, state) = blocking(move || {
        let id = engine.start_instance(&req.definition_id, req.data, &req.selections)?;
        let state = engine.run_to_quiescence(&id)?;
        Ok((id, state))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({"instance_id": id, "state": state}))).into_response())
}

async fn get_instance(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let inst = s.engine.instance(&id).ok_or(EngineError::UnknownInstance(id))?;
    Ok(Json(inst).into_response())
}

#[derive(Deserialize)]
struct TaskQuery {
    state: Option<TaskState>,
    instance: Option<String>,
}

async fn list_tasks(State(s): State<AppState>, Query(q): Query<TaskQuery>) -> Json<Value> {
    let mut tasks: Vec<_> = s
        .engine
        .tasks()
        .into_iter()
        .filter(|t| q.state.is_none_or(|st| t.state == st))
        .filter(|t| q.instance.as_ref().is_none_or(|i| &t.root_instance_id == i))
        .collect();
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Json(json!(tasks))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteRequest {
    outputs: BTreeMap<String, Value>,
}

async fn complete_task(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<CompleteRequest>,
) -> ApiResult {
    let mut outputs = BTreeMap::new();
    for (k, v) in req.outputs {
        let path = FieldPath::parse(&k).map_err(|e| ApiError::bad_request(format!("output `{k}`: {e}")))?;
        outputs.insert(path, v);
    }
    let engine = s.engine.clone();
    let task_id = id.clone();
    let inst = blocking(move || {
        engine.complete_user_task(&task_id, &outputs)?;
        let task = engine.tasks().into_iter().find(|t| t.task_id == task_id);
        let root = task.map(|t| t.root_instance_id).unwrap_or_default();
        Ok(engine.instance(&root))
    })
    .await?;
    Ok(Json(json!({
        "task_id": id,
        "instance_id": inst.as_ref().map(|i| i.instance_id.clone()),
        "state": inst.map(|i| i.state),
    }))
    .into_response())
}

async fn list_plugins(State(s): State<AppState>, Path(vp): Path<String>) -> ApiResult {
    let reg = s.engine.registry();
    if !reg.variation_points().any(|v| v == vp) {
        return Err(ApiError(
            StatusCode::NOT_FOUND,
            "unknown_variation_point".into(),
            format!("no variation point `{vp}`"),
        ));
    }
    let plugins: Vec<Value> = reg
        .available(&vp)
        .into_iter()
        .map(|p| json!({"plugin_id": p.plugin_id, "label": p.display_label}))
        .collect();
    Ok(Json(json!({"variation_point": vp, "plugins": plugins})).into_response())
}

#[derive(Deserialize)]
struct IncidentQuery {
    resolution: Option<Resolution>,
}

async fn list_incidents(State(s): State<AppState>, Query(q): Query<IncidentQuery>) -> Json<Value> {
    let mut incidents: Vec<_> = s
        .engine
        .incidents()
        .into_iter()
        .filter(|i| q.resolution.is_none_or(|r| i.resolution == r))
        .collect();
    incidents.sort_by(|a, b| a.incident_id.cmp(&b.incident_id));
    Json(json!(incidents))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolveRequest {
    action: IncidentAction,
}

async fn resolve_incident(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ResolveRequest>,
) -> ApiResult {
    let engine = s.engine.clone();
    let incident_id = id.clone();
    let incident = blocking(move || {
        engine.resolve_incident(&incident_id, req.action)?;
        Ok(engine.incidents().into_iter().find(|i| i.incident_id == incident_id))
    })
    .await?;
    Ok(Json(json!(incident)).into_response())
}
