//! HTTP decision-support service and the journal replay shared with the CLI.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{BackboneError, Store, WeightDiff};
use crate::builder::{build_graph, GraphSnapshot, TwinState};
use crate::engine::{
    attribute_report, ingest, ingest_with, what_if, EngineError, EngineOptions, ExternalEvent, RunReport, WhatIfQuery,
};
use crate::registry::{load_registry, FusionMode, Registry, RegistryDocument, RegistryError, ValidationErrors};
use crate::types::Value;

// ---------------------------------------------------------------------------
// Problem documents
// ---------------------------------------------------------------------------

/// Structured error body: `{code, message, detail}` with a stable `code`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub detail: serde_json::Value,
}

impl Problem {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into(), detail: serde_json::Value::Null }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = detail;
        self
    }
}

impl IntoResponse for Problem {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<ValidationErrors> for Problem {
    fn from(e: ValidationErrors) -> Self {
        let list: Vec<String> = e.0.iter().map(ToString::to_string).collect();
        Problem::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_registry", e.to_string()).with_detail(json!(list))
    }
}

impl From<RegistryError> for Problem {
    fn from(e: RegistryError) -> Self {
        let (status, code) = match &e {
            RegistryError::UnknownAttribute(_) => (StatusCode::NOT_FOUND, "unknown_attribute"),
            RegistryError::UnknownModel(_) => (StatusCode::NOT_FOUND, "unknown_model"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_registry"),
        };
        Problem::new(status, code, e.to_string())
    }
}

impl From<EngineError> for Problem {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Registry(r) => r.into(),
            EngineError::InvalidValue { ref attribute, .. } => {
                Problem::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_value", e.to_string())
                    .with_detail(json!({ "attribute": attribute }))
            }
        }
    }
}

impl From<BackboneError> for Problem {
    fn from(e: BackboneError) -> Self {
        use BackboneError as B;
        let (status, code) = match &e {
            B::Validation(v) => return v.clone().into(),
            B::Registry(r) => return r.clone().into(),
            B::InvalidPatientId(_) => (StatusCode::BAD_REQUEST, "invalid_patient_id"),
            B::UnknownPatient(_) => (StatusCode::NOT_FOUND, "unknown_patient"),
            B::PatientExists(_) => (StatusCode::CONFLICT, "patient_exists"),
            B::JourneyCompleted(_) => (StatusCode::CONFLICT, "journey_completed"),
            B::AlreadyCompleted(_) => (StatusCode::CONFLICT, "already_completed"),
            B::EventSequenceGap { .. } => (StatusCode::CONFLICT, "event_sequence_gap"),
            B::EphemeralReport => (StatusCode::CONFLICT, "ephemeral_report"),
            B::InvalidLabel { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label"),
            B::InsufficientData(_) => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data"),
            B::RegistryVersionExists(_) => (StatusCode::CONFLICT, "registry_version_exists"),
            B::MissingRegistry(_) => (StatusCode::INTERNAL_SERVER_ERROR, "missing_registry"),
            B::Io(_) | B::Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "store_error"),
        };
        Problem::new(status, code, e.to_string())
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Problem> {
    serde_json::from_slice(body)
        .map_err(|e| Problem::new(StatusCode::BAD_REQUEST, "malformed_body", format!("cannot parse request body: {e}")))
}

// ---------------------------------------------------------------------------
// Service state
// ---------------------------------------------------------------------------

pub struct AppState {
    store: Store,
    current: RwLock<Arc<Registry>>,
    token: Option<String>,
    patient_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] BackboneError),
    #[error("store holds no registry and none was supplied")]
    NoRegistry,
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

impl AppState {
    /// Opens the store, adds `registry` if that version is not stored yet,
    /// and serves the newest stored version.
    pub fn new(store_root: impl Into<PathBuf>, registry: Option<&Registry>, token: Option<String>) -> Result<Self, ServiceError> {
        let store = Store::open(store_root)?;
        if let Some(r) = registry {
            store.save_registry(r)?;
        }
        let current = store.latest_registry()?.ok_or(ServiceError::NoRegistry)?;
        Ok(Self {
            store,
            current: RwLock::new(Arc::new(current)),
            token,
            patient_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn registry(&self) -> Arc<Registry> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    async fn lock_patient(&self, id: &str) -> tokio::sync::OwnedMutexGuard<()> {
        let m = {
            let mut locks = self.patient_locks.lock().unwrap_or_else(|e| e.into_inner());
            locks.entry(id.to_string()).or_default().clone()
        };
        m.lock_owned().await
    }
}

type Shared = Arc<AppState>;

/// Runs blocking store/engine work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, Problem>
where
    F: FnOnce() -> Result<T, Problem> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(Problem::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker failed: {e}")))
    })
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/registry", get(get_registry).post(post_registry))
        .route("/registry/neighborhoods/{attr}", get(get_neighborhood))
        .route("/patients", post(create_patient))
        .route("/patients/{id}/graph", get(get_graph))
        .route("/patients/{id}/runs", get(get_runs))
        .route("/patients/{id}/observations", post(post_observation))
        .route("/patients/{id}/whatif", post(post_what_if))
        .route("/patients/{id}/attributes/{attr}", get(get_attribute))
        .route("/patients/{id}/models/{model}/enabled", post(post_model_enabled))
        .route("/patients/{id}/complete", post(post_complete))
        .route("/admin/retrain", post(post_retrain))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return Problem::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn get_registry(State(state): State<Shared>) -> Json<RegistryDocument> {
    Json(state.registry().to_document())
}

async fn post_registry(State(state): State<Shared>, body: Bytes) -> Result<Response, Problem> {
    let doc: RegistryDocument = parse_body(&body)?;
    let registry = Registry::from_document(doc)?;
    blocking(move || {
        let current = state.registry();
        if registry.version() <= current.version() {
            return Err(Problem::new(
                StatusCode::CONFLICT,
                "stale_registry_version",
                format!("version {} is not newer than {}", registry.version(), current.version()),
            ));
        }
        state.store.save_registry(&registry)?;
        let version = registry.version();
        *state.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
        Ok((StatusCode::CREATED, Json(json!({ "version": version }))).into_response())
    })
    .await
}

async fn get_neighborhood(State(state): State<Shared>, UrlPath(attr): UrlPath<String>) -> Result<Response, Problem> {
    Ok(Json(state.registry().neighborhood(&attr)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreatePatient {
    id: String,
    #[serde(default)]
    expected_inputs: BTreeSet<String>,
}

async fn create_patient(State(state): State<Shared>, body: Bytes) -> Result<Response, Problem> {
    let req: CreatePatient = parse_body(&body)?;
    let _guard = state.lock_patient(&req.id).await;
    blocking(move || {
        let twin = build_graph(state.registry(), &req.id, &req.expected_inputs)?;
        state.store.create_patient(&twin)?;
        Ok((StatusCode::CREATED, Json(twin.snapshot())).into_response())
    })
    .await
}

async fn get_graph(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<GraphSnapshot>, Problem> {
    blocking(move || Ok(Json(state.store.load_twin(&id)?.1.snapshot()))).await
}

async fn get_runs(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Vec<RunReport>>, Problem> {
    blocking(move || Ok(Json(state.store.runs(&id)?))).await
}

async fn post_observation(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<RunReport>, Problem> {
    let event: ExternalEvent = parse_body(&body)?;
    let _guard = state.lock_patient(&id).await;
    blocking(move || {
        let (mut record, mut twin) = state.store.load_twin(&id)?;
        if record.journey_status == crate::backbone::JourneyStatus::Completed {
            return Err(BackboneError::JourneyCompleted(id).into());
        }
        let options = EngineOptions { measure_time: true, ..EngineOptions::default() };
        let report = ingest_with(&mut twin, event, &options)?;
        state.store.commit_run(&mut record, &twin, &report)?;
        Ok(Json(report))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfRequest {
    #[serde(default)]
    overrides: Vec<ExternalEvent>,
    #[serde(default)]
    query: Option<WhatIfQuery>,
}

#[derive(Serialize)]
struct WhatIfResponse {
    snapshot: GraphSnapshot,
    report: RunReport,
}

async fn post_what_if(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, Problem> {
    let req: WhatIfRequest = parse_body(&body)?;
    blocking(move || {
        let (_, twin) = state.store.load_twin(&id)?;
        let (snapshot, report) = what_if(&twin, req.overrides, req.query.as_ref())?;
        Ok(Json(WhatIfResponse { snapshot, report }).into_response())
    })
    .await
}

async fn get_attribute(State(state): State<Shared>, UrlPath((id, attr)): UrlPath<(String, String)>) -> Result<Response, Problem> {
    blocking(move || {
        let (_, twin) = state.store.load_twin(&id)?;
        Ok(Json(attribute_report(&twin, &attr)?).into_response())
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnabledRequest {
    enabled: bool,
}

async fn post_model_enabled(
    State(state): State<Shared>,
    UrlPath((id, model)): UrlPath<(String, String)>,
    body: Bytes,
) -> Result<Response, Problem> {
    let req: EnabledRequest = parse_body(&body)?;
    let _guard = state.lock_patient(&id).await;
    blocking(move || {
        let (mut record, mut twin) = state.store.load_twin(&id)?;
        twin.set_model_enabled(&model, req.enabled)?;
        state.store.save_twin(&mut record, &twin)?;
        Ok(Json(twin.snapshot()).into_response())
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Completion {
    pub labels: BTreeMap<String, Value>,
}

async fn post_complete(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, Problem> {
    let req: Completion = parse_body(&body)?;
    let _guard = state.lock_patient(&id).await;
    blocking(move || {
        let (mut record, twin) = state.store.load_twin(&id)?;
        let cohort = state.store.complete_journey(&mut record, &twin, &req.labels)?;
        Ok(Json(json!({
            "patient": id,
            "journey_status": record.journey_status,
            "completed_patients": cohort.ground_truth.len(),
        }))
        .into_response())
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainResponse {
    pub new_version: u64,
    pub weight_diffs: Vec<WeightDiff>,
}

async fn post_retrain(State(state): State<Shared>) -> Result<Json<RetrainResponse>, Problem> {
    blocking(move || {
        let outcome = state.store.retrain()?;
        let new_version = outcome.registry.version();
        *state.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(outcome.registry);
        Ok(Json(RetrainResponse { new_version, weight_diffs: outcome.weight_diffs }))
    })
    .await
}

/// Binds and serves until interrupted. In-flight requests finish before exit;
/// every commit is durable before its response is sent.
pub async fn serve(state: Shared, host: &str, port: u16) -> Result<(), ServiceError> {
    let addr = format!("{host}:{port}");
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
    log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or(addr));
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}

// ---------------------------------------------------------------------------
// Journals and replay
// ---------------------------------------------------------------------------

/// A patient's event stream in file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Journal {
    /// Informational: the registry file or version the journal was written for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<serde_json::Value>,
    pub patient: String,
    #[serde(default)]
    pub events: Vec<ExternalEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<Completion>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Registry(#[from] ValidationErrors),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] BackboneError),
    #[error("cannot write output: {0}")]
    Write(std::io::Error),
}

impl ReplayError {
    /// Validation problems exit with 2; everything else is an operational failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, ReplayError::Journal(_) | ReplayError::Registry(_) | ReplayError::Engine(_))
    }
}

pub fn read_registry_file(path: &Path) -> Result<Registry, ReplayError> {
    let text = fs::read_to_string(path).map_err(|source| ReplayError::Read { path: path.display().to_string(), source })?;
    Ok(load_registry(&text)?)
}

pub fn read_journal_file(path: &Path) -> Result<Journal, ReplayError> {
    let text = fs::read_to_string(path).map_err(|source| ReplayError::Read { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| ReplayError::Journal(e.to_string()))
}

impl Journal {
    pub fn validate(&self, registry: &Registry) -> Result<(), ReplayError> {
        let mut problems = Vec::new();
        for (i, e) in self.events.iter().enumerate() {
            if let Err(err) = registry.attribute(&e.attribute) {
                problems.push(format!("event {i}: {err}"));
            }
            if i > 0 && e.timestamp < self.events[i - 1].timestamp {
                problems.push(format!("event {i}: timestamp goes backwards"));
            }
        }
        if let Some(c) = &self.completion {
            for attr in c.labels.keys() {
                if registry.attribute(attr).is_err() {
                    problems.push(format!("completion label for undeclared attribute {attr:?}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ReplayError::Journal(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub snapshot: GraphSnapshot,
    pub reports: Vec<RunReport>,
    pub twin: TwinState,
}

impl ReplayOutcome {
    /// True when a survival fusion refused to propagate in any run.
    pub fn survival_conflict(&self) -> bool {
        let registry = self.twin.registry();
        self.reports.iter().flat_map(|r| &r.conflicts).any(|c| {
            registry
                .attribute(&c.attribute)
                .is_ok_and(|d| d.is_survival() || d.fusion.mode == FusionMode::SurvivalAggregate)
        })
    }
}

/// Ingests a journal into `store` exactly as the HTTP API would: same twin
/// construction, one committed run per event, then optional completion.
pub fn replay_into(store: &Store, registry: Registry, journal: &Journal) -> Result<ReplayOutcome, ReplayError> {
    journal.validate(&registry)?;
    store.save_registry(&registry)?;
    let mut twin = build_graph(Arc::new(registry), &journal.patient, &BTreeSet::new()).map_err(EngineError::from)?;
    let mut record = store.create_patient(&twin)?;
    let mut reports = Vec::with_capacity(journal.events.len());
    for event in &journal.events {
        let report = ingest(&mut twin, event.clone())?;
        store.commit_run(&mut record, &twin, &report)?;
        reports.push(report);
    }
    if let Some(c) = &journal.completion {
        store.complete_journey(&mut record, &twin, &c.labels)?;
    }
    Ok(ReplayOutcome { snapshot: twin.snapshot(), reports, twin })
}

/// CLI replay: store under `<out>/store`, plus `snapshot.json` and `reports.json`.
pub fn replay_to_dir(registry: Registry, journal: &Journal, out: &Path) -> Result<ReplayOutcome, ReplayError> {
    journal.validate(&registry)?;
    let store = Store::open(out.join("store"))?;
    let outcome = replay_into(&store, registry, journal)?;
    write_json(&out.join("snapshot.json"), &outcome.snapshot)?;
    write_json(&out.join("reports.json"), &outcome.reports)?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReplayError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(ReplayError::Write)
}
