//! REST service over the knowledge base, the query pipeline and evaluation jobs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{Context, Result};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use mkedit_core::eval::{run_matrix_with_progress, EvalConfig, EvalReport};
use mkedit_core::kb::{EntryId, KnowledgeBase, KnowledgeEntry, Language, ParallelRecord};
use mkedit_core::pipeline::{Backends, PipelineConfig, PipelineError};
use mkedit_core::prompting::PromptMode;
use mkedit_core::retrieval::{ScorerConfig, SelectionStrategy};

use crate::commands::{load_dataset, probe};
use crate::config::RunConfig;
use crate::{backends, ServeArgs};

pub struct AppState {
    kb: RwLock<KnowledgeBase>,
    kb_path: Option<PathBuf>,
    backends: Backends,
    defaults: PipelineConfig,
    scorer: ScorerConfig,
    dataset: Option<Arc<Vec<ParallelRecord>>>,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
    eval_slots: Arc<Semaphore>,
}

impl AppState {
    /// `kb_path` is where mutations are persisted; `None` keeps the KB in memory.
    pub fn new(
        kb: KnowledgeBase,
        kb_path: Option<PathBuf>,
        backends: Backends,
        defaults: PipelineConfig,
        scorer: ScorerConfig,
        dataset: Option<Vec<ParallelRecord>>,
        eval_workers: usize,
    ) -> Self {
        Self {
            kb: RwLock::new(kb),
            kb_path,
            backends,
            defaults,
            scorer,
            dataset: dataset.map(Arc::new),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            eval_slots: Arc::new(Semaphore::new(eval_workers.max(1))),
        }
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(path) = &self.kb_path {
            self.kb.read().unwrap().save(path)?;
        }
        Ok(())
    }

    fn pool(&self) -> Vec<&ParallelRecord> {
        self.dataset.as_deref().map(|d| d.iter().collect()).unwrap_or_default()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

fn not_found(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.to_string())
}

fn internal(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = if e.transport {
            StatusCode::BAD_GATEWAY
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError(status, e.to_string())
    }
}

fn parse_lang(code: &str) -> Result<Language, ApiError> {
    code.parse().map_err(bad_request)
}

#[derive(Debug, Deserialize)]
struct FactFilter {
    lang: Option<String>,
}

async fn list_facts(
    State(s): State<Arc<AppState>>,
    Query(f): Query<FactFilter>,
) -> Result<Json<Vec<KnowledgeEntry>>, ApiError> {
    let lang = f.lang.as_deref().map(parse_lang).transpose()?;
    let kb = s.kb.read().unwrap();
    Ok(Json(
        kb.entries()
            .iter()
            .filter(|e| lang.is_none_or(|l| e.lang == l))
            .cloned()
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
struct NewFact {
    lang: String,
    question: String,
    answer: String,
}

#[derive(Debug, Serialize)]
struct FactCreated {
    id: EntryId,
    replaced: bool,
    entry: KnowledgeEntry,
}

async fn add_fact(
    State(s): State<Arc<AppState>>,
    Json(f): Json<NewFact>,
) -> Result<(StatusCode, Json<FactCreated>), ApiError> {
    let lang = parse_lang(&f.lang)?;
    let mut kb = s.kb.write().unwrap();
    let (id, replaced) = kb.upsert_fact(lang, &f.question, &f.answer).map_err(bad_request)?;
    if let Some(path) = &s.kb_path {
        kb.save(path).map_err(internal)?;
    }
    let entry = kb.get(id).cloned().expect("just inserted");
    let status = if replaced { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(FactCreated { id, replaced, entry })))
}

async fn delete_fact(State(s): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    let mut kb = s.kb.write().unwrap();
    kb.remove(EntryId(id))
        .ok_or_else(|| not_found(format!("no fact with id {id}")))?;
    if let Some(path) = &s.kb_path {
        kb.save(path).map_err(internal)?;
    }
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    text: String,
    test_lang: String,
    mode: Option<PromptMode>,
    shots: Option<usize>,
    edit_lang: Option<String>,
}

impl AppState {
    fn pipeline_for(&self, mode: Option<PromptMode>, shots: Option<usize>) -> PipelineConfig {
        let mut c = self.defaults.clone();
        if let Some(m) = mode {
            c.mode = m;
            c.shots = if m.is_few_shot() { self.defaults.shots.max(1) } else { 0 };
        }
        if let Some(n) = shots {
            c.shots = n;
        }
        c
    }
}

async fn run_query(
    State(s): State<Arc<AppState>>,
    Json(q): Json<QueryRequest>,
) -> Result<Response, ApiError> {
    let test_lang = parse_lang(&q.test_lang)?;
    let edit_lang = q.edit_lang.as_deref().map(parse_lang).transpose()?;
    if q.text.trim().is_empty() {
        return Err(bad_request("text is empty"));
    }
    let config = s.pipeline_for(q.mode, q.shots);
    config.validate().map_err(bad_request)?;
    let snapshot = s.kb.read().unwrap().snapshot();
    let state = s.clone();
    let view = tokio::task::spawn_blocking(move || {
        probe(&q.text, test_lang, edit_lang, snapshot.entries(), &state.pool(), &config, &state.backends)
    })
    .await
    .map_err(internal)??;
    Ok(Json(view).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
struct Job {
    job_id: u64,
    status: JobStatus,
    done: usize,
    total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<EvalReport>,
}

#[derive(Debug, Deserialize)]
struct EvalJobConfig {
    edit_langs: Vec<String>,
    test_langs: Vec<String>,
    mode: Option<PromptMode>,
    shots: Option<usize>,
    strategy: Option<SelectionStrategy>,
    seed: Option<u64>,
    concurrency: Option<usize>,
    /// Evaluate only the first N records.
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct EvalRequest {
    config: EvalJobConfig,
}

fn parse_langs(codes: &[String]) -> Result<Vec<Language>, ApiError> {
    let mut out = Vec::new();
    for c in codes {
        out.extend(Language::parse_list(c).map_err(bad_request)?);
    }
    if out.is_empty() {
        return Err(bad_request("language list is empty"));
    }
    Ok(out)
}

fn update_job(s: &AppState, id: u64, f: impl FnOnce(&mut Job)) {
    if let Some(job) = s.jobs.lock().unwrap().get_mut(&id) {
        f(job);
    }
}

async fn start_eval(
    State(s): State<Arc<AppState>>,
    Json(req): Json<EvalRequest>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let dataset = s
        .dataset
        .clone()
        .ok_or_else(|| bad_request("the service was started without --data"))?;
    let c = req.config;
    let edit_langs = parse_langs(&c.edit_langs)?;
    let test_langs = parse_langs(&c.test_langs)?;
    let mut pipeline = s.pipeline_for(c.mode, c.shots);
    if let Some(st) = c.strategy {
        pipeline.strategy = st;
    }
    if let Some(seed) = c.seed {
        pipeline.seed = seed;
    }
    let config = EvalConfig {
        pipeline,
        scorer: s.scorer.clone(),
        concurrency: c.concurrency.unwrap_or(4),
    };
    config.validate().map_err(bad_request)?;
    let n = match c.limit {
        Some(n) if n == 0 || n > dataset.len() => {
            return Err(bad_request(format!("limit must be between 1 and {}", dataset.len())))
        }
        Some(n) => n,
        None => dataset.len(),
    };

    let id = s.next_job.fetch_add(1, Ordering::SeqCst);
    s.jobs.lock().unwrap().insert(
        id,
        Job {
            job_id: id,
            status: JobStatus::Queued,
            done: 0,
            total: n * edit_langs.len() * test_langs.len(),
            error: None,
            report: None,
        },
    );
    let state = s.clone();
    tokio::spawn(async move {
        let _slot = state.eval_slots.clone().acquire_owned().await;
        update_job(&state, id, |j| j.status = JobStatus::Running);
        let worker = state.clone();
        let result = tokio::task::spawn_blocking(move || {
            run_matrix_with_progress(
                &dataset[..n],
                &edit_langs,
                &test_langs,
                Some(&dataset),
                &config,
                &worker.backends,
                &|p| update_job(&worker, id, |j| j.done = p.done),
            )
        })
        .await;
        update_job(&state, id, |j| match result {
            Ok(Ok(report)) => {
                j.status = JobStatus::Done;
                j.done = j.total;
                j.report = Some(report);
            }
            Ok(Err(e)) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))))
}

async fn get_eval(State(s): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let jobs = s.jobs.lock().unwrap();
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    Ok(Json(job).into_response())
}

async fn get_report(State(s): State<Arc<AppState>>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let (id, csv) = match file.rsplit_once('.') {
        Some((id, "csv")) => (id, true),
        Some((id, "json")) => (id, false),
        _ => return Err(not_found("reports are served as <id>.csv or <id>.json")),
    };
    let id: u64 = id.parse().map_err(|_| not_found(format!("no report {file}")))?;
    let jobs = s.jobs.lock().unwrap();
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no report {id}")))?;
    let report = job
        .report
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::CONFLICT, format!("job {id} is {:?}", job.status).to_lowercase()))?;
    Ok(if csv {
        ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()).into_response()
    } else {
        Json(report).into_response()
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/facts", get(list_facts).post(add_fact))
        .route("/api/facts/{id}", delete(delete_fact))
        .route("/api/query", post(run_query))
        .route("/api/eval", post(start_eval))
        .route("/api/eval/{id}", get(get_eval))
        .route("/api/reports/{file}", get(get_report))
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

pub fn serve(a: ServeArgs, argv: &[String]) -> Result<()> {
    let dataset = a.data.as_deref().map(|p| load_dataset(p, None)).transpose()?;
    let defaults = a.prompt.resolve(dataset.is_some());
    let mut snapshot = RunConfig::new("serve", argv)
        .pipeline(&defaults)
        .backend(&a.backend)
        .input("addr", &a.addr);
    snapshot.validate()?;
    let kb = if a.kb.exists() {
        KnowledgeBase::load(&a.kb).with_context(|| format!("reading {}", a.kb.display()))?
    } else {
        KnowledgeBase::new()
    };
    let backends = backends::build(&a.backend)?;
    let state = Arc::new(AppState::new(
        kb,
        Some(a.kb.clone()),
        backends,
        defaults,
        a.backend.scorer_config(),
        dataset,
        a.eval_workers,
    ));
    snapshot.write(&crate::config::sibling(&a.kb, "serve.config.json"), &[&a.kb])?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state.clone()))
            .with_graceful_shutdown(shutdown_signal())
            .await?;
        anyhow::Ok(())
    })?;
    state.flush()?;
    eprintln!("knowledge base saved to {}", a.kb.display());
    Ok(())
}
