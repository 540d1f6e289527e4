//! HTTP routes. Every body is JSON except the CSV upload.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ncdkit_core::dataset::{load_csv, materialize_view, Dataset, DatasetRegistry, SelectionState};
use ncdkit_core::pipeline::{
    class_counts, explain_run, run_model, tsne_input, tsne_payload, ModelConfig, ModelKind, RulesDocument,
    TrainRequest, TsneJob,
};
use ncdkit_core::projection::{check_request_perplexity, tsne_fit, TsneCache, TsneSource};
use ncdkit_core::rules::RuleTreeConfig;
use ncdkit_core::Error;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::jobs::{JobKind, JobQueue};
use crate::store::{ResultStore, StoredResult, TsneResult, DEFAULT_RESULT_CAPACITY};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub result_capacity: usize,
    pub tsne_cache_capacity: usize,
    pub persist_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            result_capacity: DEFAULT_RESULT_CAPACITY,
            tsne_cache_capacity: 16,
            persist_dir: None,
        }
    }
}

pub struct AppState {
    pub datasets: Arc<DatasetRegistry>,
    pub jobs: JobQueue,
    pub results: Arc<ResultStore>,
    pub tsne_cache: Arc<TsneCache>,
}

impl AppState {
    pub fn new(config: &ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            datasets: Arc::new(DatasetRegistry::new()),
            jobs: JobQueue::new(config.workers),
            results: Arc::new(ResultStore::new(config.result_capacity, config.persist_dir.clone())),
            tsne_cache: Arc::new(TsneCache::new(config.tsne_cache_capacity)),
        })
    }
}

/// Error response body: `{code, message, detail}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "NotFound".into(),
            message,
            detail: Value::Null,
        }
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::UnknownDataset(_) | Error::StaleResult(_) => StatusCode::NOT_FOUND,
        Error::DivergedError(_) | Error::Checkpoint(_) => StatusCode::INTERNAL_SERVER_ERROR,
        Error::Cancelled => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::MissingValue { row, column } => json!({"row": row, "column": column}),
            Error::TooFewRows { rows, k } => json!({"rows": rows, "k": k}),
            Error::BadPerplexity { perplexity, rows } => json!({"perplexity": perplexity, "rows": rows}),
            _ => Value::Null,
        };
        Self {
            status: status_for(&e),
            code: e.code().to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| Error::BadConfig(format!("request body: {e}")).into())
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ncdkit_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(Error::DivergedError(format!("worker task failed: {e}")).into()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/datasets", post(upload_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/classes", get(list_classes))
        .route("/views", post(view_summary))
        .route("/models/{kind}/train", post(train))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/results/{id}", get(get_result))
        .route("/tsne", post(tsne))
        .route("/rules", post(rules))
        .route("/points/{dataset}/{row}", get(point))
        .with_state(state)
}

fn dataset_json(ds: &Dataset) -> Value {
    json!({"dataset_id": ds.id, "schema": ds.schema, "n_rows": ds.row_count()})
}

async fn upload_dataset(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let header = match q.get("header").map(String::as_str) {
        None | Some("true") | Some("1") => true,
        Some("false") | Some("0") => false,
        Some(other) => return Err(Error::BadConfig(format!("header must be true or false, got {other:?}")).into()),
    };
    let ds = blocking(move || load_csv(&body, header)).await?;
    let ds = state.datasets.insert(ds);
    Ok(Json(dataset_json(&ds)))
}

async fn get_dataset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let ds = state.datasets.get(&id)?;
    Ok(Json(dataset_json(&ds)))
}

async fn list_classes(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let ds = state.datasets.get(&id)?;
    let target = q
        .get("target")
        .ok_or_else(|| Error::BadConfig("query parameter target is required".into()))?;
    let classes: Vec<Value> = ds
        .list_class_values(target)?
        .into_iter()
        .map(|(value, count)| json!({"value": value, "count": count}))
        .collect();
    Ok(Json(json!({"target": target, "classes": classes})))
}

async fn view_summary(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let sel: SelectionState = parse_body(&body)?;
    let ds = state.datasets.get(&sel.dataset_id)?;
    let view = materialize_view(&ds, &sel)?;
    let classes: serde_json::Map<String, Value> = class_counts(&ds, &sel)?
        .into_iter()
        .map(|(c, (status, count))| (c, json!({"status": status, "count": count})))
        .collect();
    Ok(Json(json!({
        "n_known": view.n_known(),
        "n_unknown": view.n_unknown(),
        "C": view.known_classes.len(),
        "known_classes": view.known_classes,
        "unknown_classes": view.unknown_classes,
        "classes": classes,
    })))
}

fn job_kind(kind: ModelKind) -> JobKind {
    match kind {
        ModelKind::Baseline => JobKind::TrainBaseline,
        ModelKind::TabularNcd => JobKind::TrainTabularNcd,
        ModelKind::Kmeans => JobKind::Kmeans,
        ModelKind::Spectral => JobKind::Spectral,
    }
}

async fn train(
    State(state): State<Arc<AppState>>,
    Path(kind): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let kind: ModelKind = kind.parse()?;
    let req: TrainRequest = parse_body(&body)?;
    let config = ModelConfig::parse(kind, &req.config, req.seed)?;
    let ds = state.datasets.get(&req.selection.dataset_id)?;
    req.selection.validate(&ds)?;
    let results = state.results.clone();
    let selection = req.selection;
    let job_id = state.jobs.submit(
        job_kind(kind),
        Box::new(move |sink| {
            let run = run_model(&ds, &selection, &config, sink)?;
            results.insert(StoredResult::Run(Arc::new(run)))
        }),
    );
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id}))))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(state.jobs.list()))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state.jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))?;
    Ok(Json(json!(job)))
}

async fn cancel_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state.jobs.cancel(&id).ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))?;
    Ok(Json(json!(job)))
}

async fn get_result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let mut body = match state.results.get(&id)? {
        StoredResult::Run(run) => json!(run.summary()),
        StoredResult::Tsne(t) => json!(*t),
    };
    body["result_id"] = json!(id);
    Ok(Json(body))
}

/// Everything a t-SNE computation needs, resolved up front so that
/// request errors surface before any work is queued.
struct TsnePlan {
    ds: Arc<Dataset>,
    job: TsneJob,
    clusters: Option<Arc<ncdkit_core::pipeline::RunResult>>,
    request: ncdkit_core::projection::TsneRequest,
    x: ndarray::Array2<f64>,
    rows: Vec<usize>,
}

fn plan_tsne(state: &AppState, job: TsneJob) -> ncdkit_core::Result<TsnePlan> {
    let ds = state.datasets.get(&job.selection.dataset_id)?;
    let model = match &job.source {
        TsneSource::Latent { model_id } => Some(state.results.run(model_id)?),
        TsneSource::RawFeatures => None,
    };
    let clusters = job.color_by.as_deref().map(|id| state.results.run(id)).transpose()?;
    if let Some(c) = &clusters {
        if c.dataset_id != ds.id {
            return Err(Error::StaleResult("color_by result belongs to another dataset".into()));
        }
    }
    let (request, x, rows) = tsne_input(&ds, &job, model.as_deref())?;
    check_request_perplexity(request.perplexity, rows.len())?;
    Ok(TsnePlan {
        ds,
        job,
        clusters,
        request,
        x,
        rows,
    })
}

fn run_tsne(plan: TsnePlan, cache: &TsneCache) -> ncdkit_core::Result<TsneResult> {
    let key = plan.request.key(&plan.rows);
    let (emb, cache_hit) = cache.get_or_compute(&key, || tsne_fit(&plan.x, &plan.rows, &plan.request))?;
    let payload = tsne_payload(&plan.ds, &emb, &plan.job.selection, plan.clusters.as_deref())?;
    Ok(TsneResult {
        job: plan.job,
        request_key: key,
        cache_hit,
        payload,
    })
}

/// Runs inline by default; `?async=true` queues a job instead.
async fn tsne(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let job: TsneJob = parse_body(&body)?;
    let queued = matches!(q.get("async").map(String::as_str), Some("true") | Some("1"));
    let st = state.clone();
    let plan = blocking(move || plan_tsne(&st, job)).await?;
    let cache = state.tsne_cache.clone();
    if queued {
        let results = state.results.clone();
        let job_id = state.jobs.submit(
            JobKind::Tsne,
            Box::new(move |sink| {
                sink.report(ncdkit_core::progress::Progress {
                    fraction: 0.0,
                    eta_seconds: None,
                })?;
                let result = run_tsne(plan, &cache)?;
                results.insert(StoredResult::Tsne(Arc::new(result)))
            }),
        );
        return Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id}))).into_response());
    }
    let result = blocking(move || run_tsne(plan, &cache)).await?;
    Ok(Json(json!(result)).into_response())
}

#[derive(Debug, Deserialize)]
struct RulesBody {
    result_id: String,
    #[serde(flatten)]
    config: RuleTreeConfig,
}

/// Returns the rule document, or plain text with `?format=text`.
async fn rules(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: RulesBody = parse_body(&body)?;
    let text = match q.get("format").map(String::as_str) {
        None | Some("structured") => false,
        Some("text") => true,
        Some(other) => return Err(Error::BadConfig(format!("unknown format {other:?}")).into()),
    };
    let run = state.results.run(&req.result_id)?;
    let ds = state.datasets.get(&run.dataset_id)?;
    let doc: RulesDocument = blocking(move || explain_run(&ds, &run.summary(), &req.config)).await?;
    if text {
        let out: String = doc
            .trees
            .iter()
            .map(|(name, t)| format!("# {name}\n{}", t.text))
            .collect::<Vec<_>>()
            .join("\n");
        return Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], out).into_response());
    }
    Ok(Json(json!(doc)).into_response())
}

async fn point(
    State(state): State<Arc<AppState>>,
    Path((dataset, row)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let ds = state.datasets.get(&dataset)?;
    let record = row
        .parse::<usize>()
        .ok()
        .and_then(|r| ds.row_record(r).map(|rec| (r, rec)))
        .ok_or_else(|| ApiError::not_found(format!("no row {row:?} in dataset {dataset:?}")))?;
    let attributes: Vec<Value> = record
        .1
        .into_iter()
        .map(|(name, value)| json!({"name": name, "value": value}))
        .collect();
    Ok(Json(json!({"dataset_id": ds.id, "row": record.0, "attributes": attributes})))
}
