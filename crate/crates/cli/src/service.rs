//! HTTP API over a frozen SuperNet and predictor.
//!
//! `GET /api/model`, `POST /api/search`, `POST /api/evaluate` (only when a
//! dataset is attached) and `GET /api/history`. Model state is read-only
//! after startup; the history ring buffer sits behind a mutex.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ecmt_core::data::MtlDataset;
use ecmt_core::predictor::Predictor;
use ecmt_core::search::{search, PreferenceQuery, SearchConfig, SearchResult, DEFAULT_CYCLES, DEFAULT_POOL_SIZE};
use ecmt_core::slimnet::{SuperNet, WidthConfig, WIDTH_STEP};
use ecmt_core::task::TaskKind;
use ecmt_core::{Array, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::app::{resolve, ServeArgs};
use crate::error::CliError;
use crate::measure::{calibration_for, measure, Measurement};

pub const HISTORY_CAPACITY: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: usize,
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub encoder: usize,
    pub decoders: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub tasks: Vec<TaskInfo>,
    pub width_list: Vec<f64>,
    pub layer_counts: LayerCounts,
    pub macs_min: u64,
    pub macs_max: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub budget_macs: u64,
    pub preferences: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub cycles: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub budget_macs: u64,
    pub preferences: Vec<f64>,
    pub seed: u64,
    pub macs: u64,
    pub predicted_losses: Vec<f64>,
}

/// Loaded model, optional evaluation data, and the query history.
pub struct Session {
    net: SuperNet,
    predictor: Predictor,
    data: Option<(MtlDataset, Vec<Array>)>,
    info: ModelInfo,
    history: Mutex<VecDeque<HistoryEntry>>,
}

impl Session {
    pub fn new(net: SuperNet, predictor: Predictor, data: Option<MtlDataset>) -> Result<Self, Error> {
        if predictor.task_count() != net.task_count() || predictor.input_dim() != net.slimmable_layer_count() {
            return Err(Error::Dimension(format!(
                "predictor expects {} inputs and {} tasks, network has {} layers and {} tasks",
                predictor.input_dim(),
                predictor.task_count(),
                net.slimmable_layer_count(),
                net.task_count()
            )));
        }
        let (hi, lo) = net.extremes();
        let info = ModelInfo {
            tasks: net.tasks().iter().enumerate().map(|(id, t)| TaskInfo { id, name: t.name.clone(), kind: t.kind.clone() }).collect(),
            width_list: net.widths().ratios().to_vec(),
            layer_counts: LayerCounts { encoder: net.encoder_layer_count(), decoders: net.decoder_layer_counts() },
            macs_min: net.count_macs(&lo)?,
            macs_max: net.count_macs(&hi)?,
        };
        let data = match data {
            Some(d) => {
                let calib = calibration_for(&d)?;
                Some((d, calib))
            }
            None => None,
        };
        Ok(Self { net, predictor, data, info, history: Mutex::new(VecDeque::new()) })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }
}

pub type SharedSession = Option<Arc<Session>>;

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn bad_request(msg: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, json!({ "error": msg.to_string() }))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    let id = format!("{:016x}", rand::random::<u64>());
    log::error!("request {id} failed: {e}");
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id }))
}

fn session(state: &SharedSession) -> Result<Arc<Session>, ApiError> {
    state.clone().ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "no model loaded" })))
}

async fn model_info(State(state): State<SharedSession>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(session(&state)?.info.clone()))
}

async fn run_search(State(state): State<SharedSession>, body: Bytes) -> Result<Json<SearchResult>, ApiError> {
    let s = session(&state)?;
    let req: SearchRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    let query = PreferenceQuery { budget_macs: req.budget_macs, preferences: req.preferences.clone() };
    query.validate(s.net.task_count()).map_err(bad_request)?;
    let cfg = SearchConfig {
        pool_size: DEFAULT_POOL_SIZE,
        cycles: req.cycles.unwrap_or(DEFAULT_CYCLES),
        eta: WIDTH_STEP,
        seed: req.seed.unwrap_or(0),
    };
    let worker = s.clone();
    let result = tokio::task::spawn_blocking(move || search(&worker.net, &worker.predictor, &query, &cfg))
        .await
        .map_err(internal)?;
    let result = match result {
        Ok(r) => r,
        Err(Error::InfeasibleBudget { budget, min_macs }) => {
            return Err(ApiError(
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": format!("budget {budget} is below the minimum {min_macs} MACs"), "macs_min": min_macs }),
            ))
        }
        Err(e @ Error::Argument(_)) => return Err(bad_request(e)),
        Err(e) => return Err(internal(e)),
    };
    let mut history = s.history.lock().map_err(internal)?;
    if history.len() == HISTORY_CAPACITY {
        history.pop_front();
    }
    history.push_back(HistoryEntry {
        budget_macs: req.budget_macs,
        preferences: req.preferences,
        seed: cfg.seed,
        macs: result.macs,
        predicted_losses: result.predicted_losses.clone(),
    });
    Ok(Json(result))
}

#[derive(Deserialize)]
struct EvaluateRequest {
    config: WidthConfig,
}

async fn evaluate(State(state): State<SharedSession>, body: Bytes) -> Result<Json<Measurement>, ApiError> {
    let s = session(&state)?;
    if s.data.is_none() {
        return Err(ApiError(StatusCode::CONFLICT, json!({ "error": "no dataset attached; start the server with --data" })));
    }
    let req: EvaluateRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    s.net.validate(&req.config).map_err(bad_request)?;
    let worker = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        let (data, calib) = worker.data.as_ref().expect("checked above");
        measure(&worker.net, &req.config, data, calib)
    })
    .await
    .map_err(internal)?;
    result.map(Json).map_err(internal)
}

async fn history(State(state): State<SharedSession>) -> Result<Json<Vec<HistoryEntry>>, ApiError> {
    let s = session(&state)?;
    let h = s.history.lock().map_err(internal)?;
    Ok(Json(h.iter().cloned().collect()))
}

pub fn router(state: SharedSession, cors_origin: &str) -> Router {
    let origin = if cors_origin == "*" {
        AllowOrigin::any()
    } else {
        AllowOrigin::exact(HeaderValue::from_str(cors_origin).unwrap_or(HeaderValue::from_static("null")))
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/search", post(run_search))
        .route("/api/evaluate", post(evaluate))
        .route("/api/history", get(history))
        .layer(cors)
        .with_state(state)
}

pub fn serve(flags: ServeArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let net_path = a.net.ok_or_else(|| CliError::usage("missing required --net"))?;
    let pred_path = a.predictor.ok_or_else(|| CliError::usage("missing required --predictor"))?;
    let net = SuperNet::load(&net_path).map_err(|e| CliError::Domain(format!("{}: {e}", net_path.display())))?;
    let predictor = Predictor::load(&pred_path).map_err(|e| CliError::Domain(format!("{}: {e}", pred_path.display())))?;
    let data = match &a.dataset {
        Some(p) => Some(MtlDataset::load(p).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let session = Session::new(net, predictor, data)?;
    let addr = format!("{}:{}", a.bind.as_deref().unwrap_or("127.0.0.1"), a.port.unwrap_or(8080));
    let app = router(Some(Arc::new(session)), a.cors_origin.as_deref().unwrap_or("*"));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await
    })?;
    Ok(())
}
