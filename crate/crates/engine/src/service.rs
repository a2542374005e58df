//! JSON-over-HTTP facade used by the browser console.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::stream::{self, Stream};
use lexprobe_core::aggregate::{export_records, filter_by_code, histogram};
use lexprobe_core::lexicon::{ingest, IngestOptions};
use lexprobe_core::mock::MockKnowledge;
use lexprobe_core::{
    Battery, CombinationCode, CombinationHistogram, ExportFormat, NormalizationReport, WordList, WordSource,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dispatch::{
    run_experiment, Clock, ControlHandle, DispatchError, DispatchPolicy, ExperimentRun, RunOutcome,
    SystemClock,
};
use crate::experiment::{
    builtin_templates, ExperimentConfigSchema, ExperimentSpec, ExperimentState, NewExperiment, ProviderKind,
    ValidationError,
};
use crate::provider::{HttpChatProvider, MockProvider, Provider, ProviderError};
use crate::store::{Progress, Store, StoreError};

/// Builds the provider for one run of an experiment.
pub trait ProviderFactory: Send + Sync {
    fn provider(&self, spec: &ExperimentSpec, battery: &Battery) -> Result<Arc<dyn Provider>, ProviderError>;
}

/// Mock experiments answer from `knowledge`; HTTP experiments read their
/// credential from the environment when they start.
#[derive(Debug, Clone, Default)]
pub struct DefaultProviders {
    pub knowledge: MockKnowledge,
    pub api_base: Option<String>,
    pub mock_latency: Duration,
}

impl ProviderFactory for DefaultProviders {
    fn provider(&self, spec: &ExperimentSpec, battery: &Battery) -> Result<Arc<dyn Provider>, ProviderError> {
        Ok(match spec.provider_kind {
            ProviderKind::Mock => Arc::new(
                MockProvider::new(battery.clone(), self.knowledge.clone()).with_latency(self.mock_latency),
            ),
            ProviderKind::HttpChat => Arc::new(HttpChatProvider::from_env(self.api_base.as_deref())?),
        })
    }
}

struct Inner {
    store: Store,
    templates: Vec<ExperimentConfigSchema>,
    providers: Arc<dyn ProviderFactory>,
    clock: Arc<dyn Clock>,
    runs: Mutex<HashMap<String, ControlHandle>>,
    poll_interval: Duration,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Experiments left Running or Paused by an earlier process have no
    /// dispatcher any more, so they are marked Stopped here and can be
    /// resumed with start.
    pub fn new(store: Store, providers: Arc<dyn ProviderFactory>) -> Result<Self, StoreError> {
        for spec in store.experiments()? {
            if matches!(spec.state, ExperimentState::Running | ExperimentState::Paused) {
                store.transition(&spec.id, ExperimentState::Stopped)?;
            }
        }
        Ok(Self {
            inner: Arc::new(Inner {
                store,
                templates: builtin_templates(),
                providers,
                clock: Arc::new(SystemClock),
                runs: Mutex::new(HashMap::new()),
                poll_interval: Duration::from_millis(250),
            }),
        })
    }

    fn inner_mut(&mut self) -> &mut Inner {
        Arc::get_mut(&mut self.inner).expect("configure AppState before sharing it")
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.inner_mut().clock = clock;
        self
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.inner_mut().poll_interval = interval;
        self
    }

    pub fn with_templates(mut self, templates: Vec<ExperimentConfigSchema>) -> Self {
        self.inner_mut().templates = templates;
        self
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    /// True while a dispatcher task for `id` has not yet returned.
    pub fn is_dispatching(&self, id: &str) -> bool {
        self.runs().contains_key(id)
    }

    fn runs(&self) -> std::sync::MutexGuard<'_, HashMap<String, ControlHandle>> {
        self.inner.runs.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/experiment-templates", get(templates))
        .route("/api/experiments", get(list_experiments).post(create_experiment))
        .route("/api/experiments/{id}", get(get_experiment))
        .route("/api/experiments/{id}/words", post(upload_words))
        .route("/api/experiments/{id}/start", post(start))
        .route("/api/experiments/{id}/pause", post(pause))
        .route("/api/experiments/{id}/stop", post(stop))
        .route("/api/experiments/{id}/progress", get(progress))
        .route("/api/experiments/{id}/events", get(events))
        .route("/api/experiments/{id}/results", get(results))
        .route("/api/experiments/{id}/histogram", get(get_histogram))
        .with_state(state)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownExperiment(_) => StatusCode::NOT_FOUND,
            StoreError::IllegalTransition { .. } => StatusCode::CONFLICT,
            StoreError::Validation(_) | StoreError::MissingReference { .. } => StatusCode::BAD_REQUEST,
            StoreError::Db(_) | StoreError::Corrupt(_) | StoreError::SchemaVersion { .. } => {
                tracing::error!(error = %e, "store failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self::new(status, e.to_string())
    }
}

impl From<ValidationError> for ApiError {
    fn from(e: ValidationError) -> Self {
        Self::bad_request(e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Live counters pushed to the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub experiment_id: String,
    pub answered: usize,
    pub total: usize,
    pub yes: usize,
    pub no: usize,
    pub unparseable: usize,
    pub state: ExperimentState,
    pub timestamp: DateTime<Utc>,
}

impl ProgressEvent {
    fn new(experiment_id: &str, p: Progress, timestamp: DateTime<Utc>) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            answered: p.answered,
            total: p.total,
            yes: p.yes,
            no: p.no,
            unparseable: p.unparseable,
            state: p.state,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateExperiment {
    pub name: String,
    /// Name of the template the values were entered into; the first
    /// bundled template when omitted.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub values: serde_json::Map<String, Value>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub provider: Option<ProviderKind>,
    #[serde(default)]
    pub dispatch: Option<DispatchPolicy>,
    #[serde(default)]
    pub battery_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordsUploaded {
    pub experiment: ExperimentSpec,
    pub word_list_id: String,
    pub words: usize,
    pub report: NormalizationReport,
}

async fn templates(State(state): State<AppState>) -> Json<Vec<ExperimentConfigSchema>> {
    Json(state.inner.templates.clone())
}

async fn list_experiments(State(state): State<AppState>) -> ApiResult<Json<Vec<ExperimentSpec>>> {
    Ok(Json(state.store().experiments()?))
}

async fn get_experiment(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<ExperimentSpec>> {
    Ok(Json(state.store().experiment(&id)?))
}

async fn create_experiment(
    State(state): State<AppState>,
    body: Result<Json<CreateExperiment>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ExperimentSpec>)> {
    let Json(body) = body?;
    if body.name.trim().is_empty() {
        return Err(ValidationError::new("name", "a name is required").into());
    }
    let templates = &state.inner.templates;
    let schema = match &body.template {
        None => templates.first(),
        Some(name) => templates.iter().find(|t| &t.name == name),
    }
    .ok_or_else(|| ApiError::bad_request("unknown template"))?;
    let mut new = NewExperiment::from_form(schema, body.name.trim(), &body.values)?;
    new.id = body.id;
    if let Some(kind) = body.provider {
        new.provider_kind = kind;
    }
    if let Some(policy) = body.dispatch {
        new.dispatch = policy;
    }
    if let Some(battery) = body.battery_id {
        new.battery_id = battery;
    }
    let spec = state.store().create_experiment(new)?;
    Ok((StatusCode::CREATED, Json(spec)))
}

async fn upload_words(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<WordsUploaded>> {
    let store = state.store();
    let spec = store.experiment(&id)?;
    if spec.state != ExperimentState::Draft {
        return Err(ApiError::conflict(format!(
            "words can only be loaded in draft, experiment is {}",
            spec.state
        )));
    }
    let (words, report) =
        ingest(&body, IngestOptions::default()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if words.is_empty() {
        return Err(ApiError::bad_request("the upload contains no words"));
    }
    let list = WordList::from_words(spec.name.clone(), WordSource::LemmaFile, words);
    store.put_word_list(&list)?;
    let experiment = store.set_word_list(&id, &list.id)?;
    Ok(Json(WordsUploaded {
        experiment,
        word_list_id: list.id.clone(),
        words: list.len(),
        report,
    }))
}

async fn start(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ExperimentSpec>> {
    let store = state.store();
    let spec = store.experiment(&id)?;
    if spec.wordlist_id.is_none() {
        return Err(ApiError::conflict("no words loaded"));
    }
    if spec.state == ExperimentState::Paused {
        let spec = store.transition(&id, ExperimentState::Running)?;
        if let Some(control) = state.runs().get(&id) {
            control.resume();
        }
        return Ok(Json(spec));
    }
    if !spec.state.can_transition(ExperimentState::Running) {
        return Err(StoreError::IllegalTransition {
            from: spec.state,
            to: ExperimentState::Running,
        }
        .into());
    }
    let battery = store.battery(&spec.battery_id)?;
    let provider = state
        .inner
        .providers
        .provider(&spec, &battery)
        .map_err(|e| ApiError::bad_request(format!("provider unavailable: {e}")))?;
    let control = ControlHandle::new();
    {
        let mut runs = state.runs();
        if runs.contains_key(&id) {
            return Err(ApiError::conflict("the previous run is still finishing"));
        }
        runs.insert(id.clone(), control.clone());
    }
    let spec = match store.transition(&id, ExperimentState::Running) {
        Ok(spec) => spec,
        Err(e) => {
            state.runs().remove(&id);
            return Err(e.into());
        }
    };
    let run = ExperimentRun::from_spec(&spec, battery);
    tokio::spawn(dispatch_task(state.clone(), run, provider, control));
    Ok(Json(spec))
}

async fn dispatch_task(
    state: AppState,
    run: ExperimentRun,
    provider: Arc<dyn Provider>,
    control: ControlHandle,
) {
    let id = run.experiment_id.clone();
    let store = state.store().clone();
    let result = run_experiment(
        &run,
        provider,
        Arc::new(store.clone()),
        control,
        state.inner.clock.clone(),
    )
    .await;
    let complete = match &result {
        Ok(summary) => {
            tracing::info!(experiment = %id, ?summary, "run finished");
            summary.outcome == Some(RunOutcome::Complete)
        }
        Err(DispatchError::Fatal { error, summary }) => {
            tracing::error!(experiment = %id, %error, ?summary, "run aborted");
            false
        }
        Err(error) => {
            tracing::error!(experiment = %id, %error, "run failed");
            false
        }
    };
    let settle = || -> Result<(), StoreError> {
        let current = store.experiment(&id)?.state;
        if complete && current == ExperimentState::Running {
            store.transition(&id, ExperimentState::Complete)?;
        } else if matches!(current, ExperimentState::Running | ExperimentState::Paused) {
            store.transition(&id, ExperimentState::Stopped)?;
        }
        Ok(())
    };
    if let Err(e) = settle() {
        tracing::error!(experiment = %id, error = %e, "could not record final state");
    }
    state.runs().remove(&id);
}

async fn pause(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ExperimentSpec>> {
    let spec = state.store().transition(&id, ExperimentState::Paused)?;
    if let Some(control) = state.runs().get(&id) {
        control.pause();
    }
    Ok(Json(spec))
}

async fn stop(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ExperimentSpec>> {
    let store = state.store();
    let current = store.experiment(&id)?;
    if current.state == ExperimentState::Stopped {
        return Ok(Json(current));
    }
    let spec = store.transition(&id, ExperimentState::Stopped)?;
    if let Some(control) = state.runs().get(&id) {
        control.stop();
    }
    Ok(Json(spec))
}

async fn progress(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ProgressEvent>> {
    let p = state.store().progress(&id)?;
    Ok(Json(ProgressEvent::new(&id, p, state.inner.clock.now())))
}

/// Emits an event whenever the counters or the state change. The stream
/// ends after the experiment reaches Stopped or Complete and its
/// dispatcher has drained, so the last event carries the final counts.
async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    state.store().experiment(&id)?;
    let interval = state.inner.poll_interval;
    let stream = stream::unfold(
        (state, id, None::<(usize, ExperimentState)>, false),
        move |(state, id, last, done)| async move {
            if done {
                return None;
            }
            loop {
                if last.is_some() {
                    tokio::time::sleep(interval).await;
                }
                let p = match state.store().progress(&id) {
                    Ok(p) => p,
                    Err(e) => {
                        let event = Event::default().event("error").data(e.to_string());
                        return Some((Ok(event), (state, id, last, true)));
                    }
                };
                let finished = p.state.is_terminal_for_stream() && !state.is_dispatching(&id);
                let key = (p.answered, p.state);
                if last != Some(key) || finished {
                    let body = ProgressEvent::new(&id, p, state.inner.clock.now());
                    let event = Event::default()
                        .event("progress")
                        .json_data(&body)
                        .expect("progress serializes");
                    return Some((Ok(event), (state, id, Some(key), finished)));
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    combination: Option<String>,
    format: Option<String>,
}

async fn results(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> ApiResult<Response> {
    let format = match q.format.as_deref() {
        None => ExportFormat::Json,
        Some(f) => f.parse().map_err(|e: String| ApiError::bad_request(e))?,
    };
    let store = state.store();
    let spec = store.experiment(&id)?;
    let battery = store.battery(&spec.battery_id)?;
    let records = store.records(&id)?;
    let records = match q.combination.as_deref().filter(|c| !c.is_empty()) {
        None => records,
        Some(code) => {
            let code = CombinationCode::parse(code, battery.len())
                .map_err(|e| ApiError::bad_request(e.to_string()))?;
            filter_by_code(&records, &battery, &code)
        }
    };
    Ok(match format {
        ExportFormat::Json => Json(records).into_response(),
        ExportFormat::Csv => (
            [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
            export_records(&records, ExportFormat::Csv),
        )
            .into_response(),
    })
}

async fn get_histogram(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<CombinationHistogram>> {
    let snapshot = state.store().snapshot(&id)?;
    let battery = state.store().battery(&snapshot.experiment.battery_id)?;
    Ok(Json(histogram(&snapshot.records, &battery)))
}
