//! HTTP API consumed by the what-if UI.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use whatif_core::model::{train_with, Checkpoint, ModelConfig};
use whatif_core::table::{ColumnKind, SampleTable};

use crate::analysis::{estimate, rank, root_cause, CateQuery, RankRequest, RootCauseRequest};
use crate::error::{Result, ServiceError};
use crate::runs::TrainRun;
use crate::store::{Store, StoredDataset};

pub const PREVIEW_ROWS: usize = 50;
const BODY_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    pub step: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<serde_json::Value>,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Store>,
    jobs: Arc<Mutex<HashMap<String, JobStatus>>>,
    next_job: Arc<AtomicU64>,
    /// Training jobs run one at a time.
    train_slot: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        AppState {
            store: Arc::new(store),
            jobs: Arc::default(),
            next_job: Arc::new(AtomicU64::new(1)),
            train_slot: Arc::default(),
        }
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().expect("job table poisoned").get_mut(id) {
            f(job);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/datasets", post(upload_dataset))
        .route("/v1/datasets/{id}", get(dataset_info))
        .route("/v1/datasets/{id}/csv", get(dataset_csv))
        .route("/v1/estimate", post(estimate_handler))
        .route("/v1/rank", post(rank_handler))
        .route("/v1/root-cause", post(root_cause_handler))
        .route("/v1/checkpoints", post(upload_checkpoint))
        .route("/v1/checkpoints/{id}", get(checkpoint_info))
        .route("/v1/jobs/train", post(submit_train))
        .route("/v1/jobs/{id}", get(job_status))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Runs the API until the process is stopped.
pub fn serve_blocking(store_root: &Path, addr: &str) -> Result<()> {
    let store = Store::open(store_root)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(AppState::new(store))).await?;
        Ok(())
    })
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(body)?)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Default, Deserialize)]
pub struct KindOverrides {
    /// Comma-separated column names forced categorical.
    pub categorical: Option<String>,
    /// Comma-separated column names forced continuous.
    pub continuous: Option<String>,
}

fn split_names(list: &Option<String>) -> Vec<&str> {
    list.as_deref()
        .map(|s| s.split(',').map(str::trim).filter(|n| !n.is_empty()).collect())
        .unwrap_or_default()
}

fn apply_overrides(table: &mut SampleTable, overrides: &KindOverrides) -> Result<()> {
    let categorical = split_names(&overrides.categorical);
    let continuous = split_names(&overrides.continuous);
    if let Some(both) = categorical.iter().find(|n| continuous.contains(n)) {
        return Err(ServiceError::Invalid(format!("column '{both}' cannot be both categorical and continuous")));
    }
    let index = |table: &SampleTable, name: &str| {
        table
            .column_index(name)
            .ok_or_else(|| ServiceError::Invalid(format!("unknown column '{name}'")))
    };
    for name in categorical {
        let c = index(table, name)?;
        let max = table.column_values(c).into_iter().fold(0.0_f64, f64::max);
        table.set_kind(
            c,
            ColumnKind::Categorical {
                classes: (max as usize + 1).max(2),
            },
        )?;
    }
    for name in continuous {
        let c = index(table, name)?;
        table.set_kind(c, ColumnKind::Continuous)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ColumnInfo {
    name: String,
    kind: ColumnKind,
}

#[derive(Debug, Serialize)]
struct DatasetInfo {
    id: String,
    rows: usize,
    columns: Vec<ColumnInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    preview: Option<Vec<Vec<f64>>>,
}

fn dataset_summary(id: String, table: &SampleTable, preview: bool) -> DatasetInfo {
    DatasetInfo {
        id,
        rows: table.row_count(),
        columns: table
            .columns()
            .iter()
            .map(|c| ColumnInfo {
                name: c.name.clone(),
                kind: c.kind,
            })
            .collect(),
        preview: preview.then(|| table.rows().take(PREVIEW_ROWS).map(<[f64]>::to_vec).collect()),
    }
}

async fn upload_dataset(
    State(state): State<AppState>,
    Query(overrides): Query<KindOverrides>,
    body: Bytes,
) -> Result<Response> {
    let info = blocking(move || {
        let mut table = SampleTable::read_csv(body.as_ref())?;
        apply_overrides(&mut table, &overrides)?;
        let id = state.store.put_dataset(&StoredDataset::from_table(&table))?;
        Ok(dataset_summary(id, &table, false))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn dataset_info(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<DatasetInfo>> {
    let table = state.store.dataset(&id)?.table()?;
    Ok(Json(dataset_summary(id, &table, true)))
}

async fn dataset_csv(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response> {
    let dataset = state.store.dataset(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], dataset.csv).into_response())
}

async fn estimate_handler(State(state): State<AppState>, body: Bytes) -> Result<Response> {
    let query: CateQuery = parse_json(&body)?;
    let response = blocking(move || estimate(&state.store, query)).await?;
    Ok(Json(response).into_response())
}

async fn rank_handler(State(state): State<AppState>, body: Bytes) -> Result<Response> {
    let request: RankRequest = parse_json(&body)?;
    let ranking = blocking(move || rank(&state.store, &request)).await?;
    Ok(Json(ranking).into_response())
}

async fn root_cause_handler(State(state): State<AppState>, body: Bytes) -> Result<Response> {
    let request: RootCauseRequest = parse_json(&body)?;
    let target = request.target.clone();
    let items = blocking(move || root_cause(&state.store, &request)).await?;
    Ok(Json(serde_json::json!({ "target": target, "items": items })).into_response())
}

#[derive(Debug, Serialize)]
struct CheckpointInfo {
    id: String,
    step: usize,
    seed: u64,
    model: ModelConfig,
}

async fn upload_checkpoint(State(state): State<AppState>, body: Bytes) -> Result<Response> {
    let info = blocking(move || {
        let id = state.store.put_checkpoint(&body)?;
        let checkpoint = Checkpoint::from_bytes(&body)?;
        Ok(CheckpointInfo {
            id,
            step: checkpoint.step,
            seed: checkpoint.seed,
            model: checkpoint.params.config,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn checkpoint_info(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<CheckpointInfo>> {
    let checkpoint = blocking({
        let state = state.clone();
        let id = id.clone();
        move || state.store.checkpoint(&id)
    })
    .await?;
    Ok(Json(CheckpointInfo {
        id,
        step: checkpoint.step,
        seed: checkpoint.seed,
        model: checkpoint.params.config,
    }))
}

async fn submit_train(State(state): State<AppState>, body: Bytes) -> Result<Response> {
    let run: TrainRun = parse_json(&body)?;
    run.prior.validate()?;
    run.model.validate()?;
    run.train.validate()?;
    if run.prior.d_max != run.model.d_max {
        return Err(ServiceError::Invalid(format!(
            "prior d_max {} differs from model d_max {}",
            run.prior.d_max, run.model.d_max
        )));
    }
    let id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    let status = JobStatus {
        id: id.clone(),
        state: JobState::Queued,
        step: 0,
        steps: run.train.steps,
        loss: None,
        checkpoint: None,
        error: None,
    };
    state
        .jobs
        .lock()
        .expect("job table poisoned")
        .insert(id.clone(), status.clone());
    tokio::spawn(run_train_job(state, id, run));
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

async fn run_train_job(state: AppState, id: String, run: TrainRun) {
    let _slot = state.train_slot.lock().await;
    state.update_job(&id, |j| j.state = JobState::Running);
    let worker_state = state.clone();
    let worker_id = id.clone();
    let outcome = blocking(move || {
        let outcome = train_with(&run.prior, &run.model, &run.train, None, |record| {
            worker_state.update_job(&worker_id, |j| {
                j.step = record.step + 1;
                j.loss = Some(record.loss);
            });
        })?;
        let bytes = Checkpoint::new(outcome.params, run.train.steps, run.train.seed).to_bytes()?;
        worker_state.store.put_checkpoint(&bytes)
    })
    .await;
    state.update_job(&id, |j| match outcome {
        Ok(checkpoint) => {
            j.state = JobState::Done;
            j.checkpoint = Some(checkpoint);
        }
        Err(e) => {
            j.state = JobState::Failed;
            j.error = Some(e.to_json());
        }
    });
}

async fn job_status(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<JobStatus>> {
    state
        .jobs
        .lock()
        .expect("job table poisoned")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("job '{id}'")))
}
