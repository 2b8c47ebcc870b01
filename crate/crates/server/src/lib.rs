//! HTTP service wrapping the benchmark library. Trained models live in
//! memory under generated ids; every heavy operation runs on a blocking
//! worker so the async executor stays responsive.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use prunebench_core::api::*;
use prunebench_core::bench::data::{generate_dataset, RecExample};
use prunebench_core::bench::eval::{evaluate, EvalOptions};
use prunebench_core::bench::flops::estimate_flops;
use prunebench_core::bench::sweep::sweep_trained;
use prunebench_core::bench::train::train_model;
use prunebench_core::bench::ttft::measure_ttft;
use prunebench_core::checkpoint;
use prunebench_core::math::Rng;
use prunebench_core::model::{ModelConfig, ModelWeights};
use prunebench_core::probe::probe_all_layers;

type StoredModel = Arc<(ModelConfig, ModelWeights)>;

#[derive(Default)]
pub struct AppState {
    models: RwLock<HashMap<String, StoredModel>>,
}

impl AppState {
    fn insert(&self, cfg: ModelConfig, w: ModelWeights) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        self.models.write().unwrap().insert(id.clone(), Arc::new((cfg, w)));
        id
    }

    fn get(&self, id: &str) -> Result<StoredModel, ApiError> {
        self.models
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no model '{id}'")))
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into() }
    }
}

impl From<prunebench_core::Error> for ApiError {
    fn from(e: prunebench_core::Error) -> Self {
        use prunebench_core::Error::*;
        match e {
            Shape(_) | Config(_) | Invalid(_) | Checkpoint(_) => ApiError::bad_request(e.to_string()),
            Diverged(_) | Io(_) | Json(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorResponse { error: self.message })).into_response()
    }
}

/// Run a CPU-heavy closure off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

fn resolve_dataset(dataset: &DatasetRef, cfg: &ModelConfig) -> Result<Vec<RecExample>, ApiError> {
    match (&dataset.examples, &dataset.generate) {
        (Some(ex), None) => {
            for e in ex {
                e.check(cfg)?;
            }
            Ok(ex.clone())
        }
        (None, Some(g)) => Ok(generate_dataset(g.count, cfg, &mut Rng::new(g.seed))?),
        _ => Err(ApiError::bad_request(
            "dataset must set exactly one of 'examples' or 'generate'",
        )),
    }
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse { status: "ok".to_string() })
}

async fn gen_data(Json(req): Json<GenDataRequest>) -> Result<Json<GenDataResponse>, ApiError> {
    let examples = blocking(move || {
        Ok(generate_dataset(req.count, &req.model, &mut Rng::new(req.seed))?)
    })
    .await?;
    Ok(Json(GenDataResponse { examples }))
}

async fn train(
    State(state): State<Arc<AppState>>,
    Json(req): Json<TrainRequest>,
) -> Result<Json<TrainResponse>, ApiError> {
    let (cfg, weights, summary) = blocking(move || {
        let mut rng = Rng::new(req.data_seed);
        let train_set = generate_dataset(req.train_examples, &req.model, &mut rng)?;
        let val_set = if req.val_examples > 0 {
            generate_dataset(req.val_examples, &req.model, &mut rng)?
        } else {
            Vec::new()
        };
        let (w, summary) = train_model(&train_set, &val_set, &req.model, &req.train)?;
        Ok((req.model, w, summary))
    })
    .await?;
    let model_id = state.insert(cfg, weights);
    tracing::info!(%model_id, "trained model stored");
    Ok(Json(TrainResponse { model_id, summary }))
}

async fn upload_model(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<UploadResponse>, ApiError> {
    let (cfg, w) = checkpoint::from_bytes(&body)?;
    let model_id = state.insert(cfg, w);
    Ok(Json(UploadResponse { model_id }))
}

async fn download_model(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Vec<u8>, ApiError> {
    let stored = state.get(&id)?;
    Ok(checkpoint::to_bytes(&stored.1, &stored.0)?)
}

async fn eval(
    State(state): State<Arc<AppState>>,
    Json(req): Json<EvalRequest>,
) -> Result<Json<EvalResponse>, ApiError> {
    let stored = state.get(&req.model_id)?;
    let data = resolve_dataset(&req.dataset, &stored.0)?;
    let count = data.len();
    let accuracy = blocking(move || {
        let opts = EvalOptions { seed: req.seed, ..Default::default() };
        Ok(evaluate(&stored.1, &stored.0, &data, req.strategy, req.ratio, req.alignment, &opts)?)
    })
    .await?;
    Ok(Json(EvalResponse { accuracy, examples: count }))
}

async fn sweep(
    State(state): State<Arc<AppState>>,
    Json(req): Json<SweepRequest>,
) -> Result<Json<SweepResponse>, ApiError> {
    let stored = state.get(&req.model_id)?;
    let data = resolve_dataset(&req.dataset, &stored.0)?;
    let report = blocking(move || {
        let ttft = req.measure_ttft.then_some(&req.ttft);
        Ok(sweep_trained(&stored.1, &stored.0, &data, &req.sweep, req.eval_seed, ttft)?)
    })
    .await?;
    Ok(Json(report))
}

async fn probe(
    State(state): State<Arc<AppState>>,
    Json(req): Json<ProbeRequest>,
) -> Result<Json<ProbeResponse>, ApiError> {
    let stored = state.get(&req.model_id)?;
    let data = resolve_dataset(&req.dataset, &stored.0)?;
    let report = blocking(move || {
        let images: Vec<Vec<usize>> = data.into_iter().map(|e| e.image).collect();
        Ok(probe_all_layers(&images, &stored.1, &stored.0, &req.options)?)
    })
    .await?;
    Ok(Json(report))
}

async fn ttft(
    State(state): State<Arc<AppState>>,
    Json(req): Json<TtftRequest>,
) -> Result<Json<TtftResponse>, ApiError> {
    let stored = state.get(&req.model_id)?;
    let data = resolve_dataset(&req.dataset, &stored.0)?;
    let stats = blocking(move || {
        Ok(measure_ttft(
            &stored.1,
            &stored.0,
            &data,
            req.strategy,
            req.ratio,
            req.alignment,
            &req.options,
        )?)
    })
    .await?;
    Ok(Json(stats))
}

async fn flops(Json(req): Json<FlopsRequest>) -> Result<Json<FlopsResponse>, ApiError> {
    req.model.validate()?;
    Ok(Json(FlopsResponse { flops: estimate_flops(&req.model, req.seq_len)? }))
}

pub fn router() -> Router {
    let state = Arc::new(AppState::default());
    Router::new()
        .route("/health", get(health))
        .route("/v1/gen-data", post(gen_data))
        .route("/v1/train", post(train))
        .route("/v1/models", post(upload_model))
        .route("/v1/models/:id/checkpoint", get(download_model))
        .route("/v1/eval", post(eval))
        .route("/v1/sweep", post(sweep))
        .route("/v1/probe", post(probe))
        .route("/v1/ttft", post(ttft))
        .route("/v1/flops", post(flops))
        .with_state(state)
}

/// Bind and serve; returns the actual local address (useful with port 0)
/// and a handle that resolves when the server stops.
pub async fn spawn(
    addr: std::net::SocketAddr,
) -> std::io::Result<(std::net::SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router()).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}
