//! HTTP interface for interactive codebook development.
//!
//! Each run lives on its own worker thread (see [`run::RunHandle`]); handlers
//! only read published snapshots or enqueue commands, so the engine keeps a
//! single writer no matter how many requests arrive.

pub mod error;
pub mod run;
pub mod world;

use std::collections::BTreeMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use codebook_forge::codebook::{diff, Codebook};
use codebook_forge::corpus::{Corpus, LabelSet};
use codebook_forge::engine::{FeedbackAck, FeedbackSubmission, PendingView, RunConfig, RunStatus};
use codebook_forge::store::{read_config, MANIFEST_FILE};
use codebook_forge::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody, ErrorDetail};
pub use run::{MetricsRow, RunHandle, Snapshot};
pub use world::{AutoWorldFactory, HttpWorldFactory, StubWorldFactory, WorldFactory, STUB_SCHEME};

/// Upper bound on a long-poll wait.
pub const MAX_WAIT: Duration = Duration::from_secs(60);

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    corpus: Arc<Corpus>,
    factory: Arc<dyn WorldFactory>,
    run_dir: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
    creating: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Runs are kept in memory only unless `run_dir` is given, in which case
    /// each run persists to `run_dir/<run_id>`.
    pub fn new(corpus: Arc<Corpus>, factory: Arc<dyn WorldFactory>, run_dir: Option<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                corpus,
                factory,
                run_dir,
                runs: RwLock::new(BTreeMap::new()),
                creating: tokio::sync::Mutex::new(()),
            }),
        }
    }

    /// Reopens every run found under the run directory. Runs that fail to
    /// open are skipped and reported.
    pub fn load_runs(&self) -> Vec<(PathBuf, String)> {
        let Some(root) = &self.inner.run_dir else { return Vec::new() };
        let Ok(entries) = std::fs::read_dir(root) else { return Vec::new() };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join(MANIFEST_FILE).exists())
            .collect();
        dirs.sort();
        let mut failed = Vec::new();
        for dir in dirs {
            match self.open_run(&dir) {
                Ok(handle) => {
                    self.inner
                        .runs
                        .write()
                        .expect("runs lock")
                        .insert(handle.run_id.clone(), handle);
                }
                Err(e) => failed.push((dir, e)),
            }
        }
        failed
    }

    fn open_run(&self, dir: &Path) -> Result<Arc<RunHandle>, String> {
        let config = read_config(dir).map_err(|e| e.to_string())?;
        let world = self.inner.factory.build(&config, &self.inner.corpus)?;
        let engine = Engine::resume(dir, self.inner.corpus.clone(), world).map_err(|e| e.to_string())?;
        Ok(RunHandle::spawn(engine))
    }

    pub fn run(&self, id: &str) -> Result<Arc<RunHandle>, ApiError> {
        self.inner
            .runs
            .read()
            .expect("runs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("run", id))
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.inner.runs.read().expect("runs lock").keys().cloned().collect()
    }

    /// Stops every run worker; completed steps are already persisted.
    pub fn shutdown(&self) {
        let runs: Vec<Arc<RunHandle>> = self.inner.runs.read().expect("runs lock").values().cloned().collect();
        for r in runs {
            r.shutdown();
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/start", post(start_run))
        .route("/runs/{id}/pending", get(get_pending))
        .route("/runs/{id}/feedback", post(post_feedback))
        .route("/runs/{id}/codebook", get(get_codebook))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/runs/{id}/narratives/{nid}", get(get_narrative))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then stops the run workers.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(state.clone());
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    tokio::task::spawn_blocking(move || state.shutdown())
        .await
        .map_err(std::io::Error::other)?;
    result
}

/// Parses a JSON body, reporting the offending field path on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = match (missing_field(&message), path.as_str()) {
            (Some(f), ".") => f,
            (Some(f), p) => format!("{p}.{f}"),
            (None, p) => p.to_string(),
        };
        let err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message);
        if field == "." {
            err
        } else {
            err.with_field(field)
        }
    })
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
pub struct CreateRunRequest {
    #[serde(default)]
    pub run_id: Option<String>,
    pub config: RunConfig,
    /// Expert labels for the validation pool. Defaults to the corpus's
    /// reference labels for the variable.
    #[serde(default)]
    pub val_labels: Option<BTreeMap<String, String>>,
}

/// Summary of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub status: RunStatus,
    pub t: u32,
    pub codebook_version: u32,
    pub guide_size: usize,
    pub stop_reason: Option<String>,
    pub computing: bool,
    pub last_error: Option<String>,
    pub pending: usize,
    pub variable: String,
    pub response_options: Vec<String>,
    pub b: usize,
    pub n: usize,
    pub k: usize,
    pub m: f64,
    pub latest_metrics: Option<MetricsRow>,
}

impl RunView {
    fn of(h: &RunHandle) -> Self {
        let s = h.snapshot();
        Self {
            run_id: h.run_id.clone(),
            status: s.status,
            t: s.t,
            codebook_version: s.codebook_version,
            guide_size: s.guide_size,
            stop_reason: s.stop_reason.clone(),
            computing: s.computing,
            last_error: s.last_error.clone(),
            pending: s.pending.len(),
            variable: h.config.variable.name.clone(),
            response_options: h.config.variable.response_options.clone(),
            b: h.config.budget,
            n: h.config.batch_size,
            k: h.config.min_guide,
            m: h.config.target,
            latest_metrics: s.metrics.last().cloned(),
        }
    }
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

async fn create_run(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRunRequest = parse_body(&body)?;
    req.config
        .validate()
        .map_err(|e| ApiError::invalid(e.field.clone(), e.to_string()))?;
    let _guard = app.inner.creating.lock().await;
    let run_id = match req.run_id {
        Some(id) => {
            if !valid_run_id(&id) {
                return Err(ApiError::invalid(
                    "run_id",
                    "run ids use letters, digits, '-', '_' and '.'",
                ));
            }
            id
        }
        None => {
            let taken = app.run_ids();
            (taken.len() + 1..)
                .map(|i| format!("run-{i:04}"))
                .find(|id| !taken.contains(id))
                .expect("unbounded range")
        }
    };
    let exists = app.run(&run_id).is_ok()
        || app
            .inner
            .run_dir
            .as_ref()
            .is_some_and(|d| d.join(&run_id).exists());
    if exists {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "run_exists",
            format!("run {run_id:?} already exists"),
        )
        .with_field("run_id"));
    }

    let corpus = app.inner.corpus.clone();
    let factory = app.inner.factory.clone();
    let dir = app.inner.run_dir.as_ref().map(|d| d.join(&run_id));
    let config = req.config;
    let id = run_id.clone();
    let handle = tokio::task::spawn_blocking(move || -> Result<Arc<RunHandle>, ApiError> {
        let labels = match req.val_labels {
            Some(map) => {
                let mut set = LabelSet::new(config.variable.name.clone(), "expert");
                for (k, v) in map {
                    set.insert(k, v);
                }
                set
            }
            None => corpus.label_set(&config.variable.name, "reference"),
        };
        let world = factory
            .build(&config, &corpus)
            .map_err(|m| ApiError::invalid("model", m))?;
        let mut engine = Engine::start_run(&id, config, corpus, &labels, world)?;
        if let Some(dir) = dir {
            engine = engine.persist_to(&dir)?;
        }
        Ok(RunHandle::spawn(engine))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    app.inner
        .runs
        .write()
        .expect("runs lock")
        .insert(run_id.clone(), handle.clone());
    Ok((StatusCode::CREATED, Json(RunView::of(&handle))))
}

async fn list_runs(State(app): State<AppState>) -> Json<serde_json::Value> {
    let runs: Vec<RunView> = app
        .inner
        .runs
        .read()
        .expect("runs lock")
        .values()
        .map(|h| RunView::of(h))
        .collect();
    Json(serde_json::json!({ "runs": runs }))
}

async fn get_run(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<RunView>, ApiError> {
    let run = app.run(&id)?;
    Ok(Json(RunView::of(&run)))
}

async fn start_run(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    let run = app.run(&id)?;
    run.start().await?;
    Ok((StatusCode::ACCEPTED, Json(RunView::of(&run))))
}

#[derive(Debug, Default, Deserialize)]
pub struct PendingQuery {
    pub wait: Option<String>,
}

/// `30s`, `500ms`, `2m` or plain seconds.
pub fn parse_wait(text: &str) -> Option<Duration> {
    let text = text.trim();
    let (num, unit) = match text.find(|c: char| !(c.is_ascii_digit() || c == '.')) {
        Some(i) => text.split_at(i),
        None => (text, "s"),
    };
    let v: f64 = num.parse().ok()?;
    let secs = match unit {
        "ms" => v / 1000.0,
        "s" => v,
        "m" => v * 60.0,
        _ => return None,
    };
    Duration::try_from_secs_f64(secs).ok()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PendingResponse {
    pub run_id: String,
    pub status: RunStatus,
    pub t: u32,
    pub codebook_version: u32,
    pub computing: bool,
    /// The wait elapsed without anything to review.
    pub heartbeat: bool,
    pub items: Vec<PendingView>,
}

async fn get_pending(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PendingQuery>,
) -> Result<Json<PendingResponse>, ApiError> {
    let run = app.run(&id)?;
    let wait = match q.wait.as_deref() {
        None => Duration::ZERO,
        Some(w) => parse_wait(w)
            .ok_or_else(|| ApiError::invalid("wait", format!("cannot read duration {w:?}")))?
            .min(MAX_WAIT),
    };
    let deadline = tokio::time::Instant::now() + wait;
    let mut rx = run.subscribe();
    loop {
        let snap = rx.borrow_and_update().clone();
        let ready = !snap.pending.is_empty() || snap.status.is_terminal() || snap.last_error.is_some();
        if ready || wait.is_zero() {
            return Ok(Json(pending_response(&run, &snap, false)));
        }
        match tokio::time::timeout_at(deadline, rx.changed()).await {
            Ok(Ok(())) => continue,
            _ => {
                let snap = run.snapshot();
                let heartbeat = snap.pending.is_empty();
                return Ok(Json(pending_response(&run, &snap, heartbeat)));
            }
        }
    }
}

fn pending_response(run: &RunHandle, snap: &Snapshot, heartbeat: bool) -> PendingResponse {
    PendingResponse {
        run_id: run.run_id.clone(),
        status: snap.status,
        t: snap.t,
        codebook_version: snap.codebook_version,
        computing: snap.computing,
        heartbeat,
        items: snap.pending.clone(),
    }
}

async fn post_feedback(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<FeedbackAck>, ApiError> {
    let run = app.run(&id)?;
    let submission: FeedbackSubmission = parse_body(&body)?;
    Ok(Json(run.submit(submission).await?))
}

#[derive(Debug, Default, Deserialize)]
pub struct CodebookQuery {
    pub version: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookDiff {
    pub previous_version: Option<u32>,
    pub added: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookResponse {
    pub latest_version: u32,
    pub codebook: Codebook,
    pub diff: CodebookDiff,
}

async fn get_codebook(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CodebookQuery>,
) -> Result<Json<CodebookResponse>, ApiError> {
    let snap = app.run(&id)?.snapshot();
    let latest = snap.codebooks.len() as u32 - 1;
    let v = q.version.unwrap_or(latest);
    let cb = snap
        .codebooks
        .get(v as usize)
        .ok_or_else(|| ApiError::not_found("codebook version", &v.to_string()).with_field("version"))?;
    let diff = match v.checked_sub(1) {
        Some(p) => {
            let (added, removed) = diff(&snap.codebooks[p as usize], cb);
            CodebookDiff {
                previous_version: Some(p),
                added,
                removed,
            }
        }
        None => CodebookDiff {
            previous_version: None,
            added: cb.bullet_texts(),
            removed: Vec::new(),
        },
    };
    Ok(Json(CodebookResponse {
        latest_version: latest,
        codebook: (**cb).clone(),
        diff,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub run_id: String,
    pub m: f64,
    pub k: usize,
    pub b: usize,
    pub rows: Vec<MetricsRow>,
}

async fn get_metrics(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<MetricsResponse>, ApiError> {
    let run = app.run(&id)?;
    Ok(Json(MetricsResponse {
        run_id: run.run_id.clone(),
        m: run.config.target,
        k: run.config.min_guide,
        b: run.config.budget,
        rows: run.snapshot().metrics.clone(),
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NarrativeView {
    pub narrative_id: String,
    pub text: String,
}

/// Only narratives in the batch under review or the guide set are served.
async fn get_narrative(
    State(app): State<AppState>,
    UrlPath((id, nid)): UrlPath<(String, String)>,
) -> Result<Json<NarrativeView>, ApiError> {
    let run = app.run(&id)?;
    if !run.snapshot().visible.contains(&nid) {
        return Err(ApiError::not_found("narrative under review", &nid));
    }
    let text = app
        .inner
        .corpus
        .text(&nid)
        .map_err(|_| ApiError::not_found("narrative", &nid))?;
    Ok(Json(NarrativeView { narrative_id: nid, text }))
}

/// The API on a private runtime thread, for tests and embedding. Dropping
/// it shuts the server down.
pub struct BackgroundServer {
    addr: std::net::SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    pub fn start(state: AppState, addr: &str) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, state, async move {
                    let _ = stopped.await;
                })
                .await
            })
        });
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| std::io::Error::other("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
