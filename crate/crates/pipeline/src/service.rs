//! HTTP/JSON inference service.
//!
//! `GET /health`, `GET /catalog`, `POST /tryon {person_id, garment_id}`.
//! Errors are `{"error": {"code", "message"}}` with 404 for unknown ids,
//! 422 for unusable inputs and 503 when no trained model is loaded.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tryon_core::data::RgbImage;
use tryon_core::TryonError;

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{PipelineError, Result};
use crate::imageio;
use crate::infer::{infer_tryon, PersonAsset, Timing, TryonModel};

#[derive(Debug, Clone)]
struct Entry<T> {
    id: String,
    thumb: String,
    asset: T,
}

/// Persons and garments the service can combine.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    persons: Vec<Entry<PersonAsset>>,
    garments: Vec<Entry<RgbImage>>,
}

impl Catalog {
    /// Take persons and garments from the first validation samples.
    pub fn from_dataset(data: &Dataset, persons: usize, garments: usize) -> Result<Self> {
        let ids = data.val_ids();
        let mut cat = Catalog::default();
        for id in ids.iter().take(persons.max(garments)) {
            let s = data.sample(id)?;
            if cat.persons.len() < persons {
                let thumb = imageio::data_url(&imageio::encode_rgb(&s.person));
                cat.persons.push(Entry { id: id.clone(), thumb, asset: PersonAsset::from(&s) });
            }
            if cat.garments.len() < garments {
                let thumb = imageio::data_url(&imageio::encode_rgb(&s.cloth));
                cat.garments.push(Entry { id: id.clone(), thumb, asset: s.cloth });
            }
        }
        Ok(cat)
    }

    pub fn add_person(&mut self, id: &str, asset: PersonAsset) {
        let thumb = imageio::data_url(&imageio::encode_rgb(&asset.image));
        self.persons.push(Entry { id: id.to_string(), thumb, asset });
    }

    pub fn add_garment(&mut self, id: &str, garment: RgbImage) {
        let thumb = imageio::data_url(&imageio::encode_rgb(&garment));
        self.garments.push(Entry { id: id.to_string(), thumb, asset: garment });
    }

    pub fn person(&self, id: &str) -> Option<&PersonAsset> {
        self.persons.iter().find(|e| e.id == id).map(|e| &e.asset)
    }

    pub fn garment(&self, id: &str) -> Option<&RgbImage> {
        self.garments.iter().find(|e| e.id == id).map(|e| &e.asset)
    }
}

/// Shared, read-only service state.
#[derive(Debug)]
pub struct AppState {
    pub catalog: Catalog,
    pub model: std::result::Result<Arc<TryonModel>, String>,
}

impl AppState {
    /// Build the catalog and load checkpoints. A missing or unreadable
    /// checkpoint leaves the service up but answering 503 on `/tryon`.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let data = Dataset::from_config(cfg)?;
        let catalog = Catalog::from_dataset(&data, cfg.serve.catalog_persons, cfg.serve.catalog_garments)?;
        let model = TryonModel::load(cfg).map(Arc::new).map_err(|e| e.to_string());
        if let Err(e) = &model {
            tracing::warn!("serving without a model: {e}");
        }
        Ok(AppState { catalog, model })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogItem {
    pub id: String,
    pub thumb: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogResponse {
    pub persons: Vec<CatalogItem>,
    pub garments: Vec<CatalogItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TryonRequest {
    pub person_id: String,
    pub garment_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometryJson {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingJson {
    pub shape_ms: f64,
    pub alignment_ms: f64,
    pub appearance_ms: f64,
    pub total_ms: f64,
}

impl From<Timing> for TimingJson {
    fn from(t: Timing) -> Self {
        TimingJson { shape_ms: t.shape_ms, alignment_ms: t.alignment_ms, appearance_ms: t.appearance_ms, total_ms: t.total_ms }
    }
}

/// Images are base64-encoded PNG bytes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TryonResponse {
    pub person_id: String,
    pub garment_id: String,
    pub geometry: GeometryJson,
    pub output: String,
    pub seg: String,
    pub warped_cloth: String,
    pub timing: TimingJson,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorResponse { error: ErrorBody { code: code.into(), message: message.into() } };
    (status, Json(body)).into_response()
}

/// Status and machine-readable code for a pipeline failure.
pub fn classify(err: &PipelineError) -> (StatusCode, &'static str) {
    match err {
        PipelineError::UnknownId { .. } => (StatusCode::NOT_FOUND, "unknown_id"),
        PipelineError::CheckpointMissing(_) | PipelineError::Checkpoint { .. } => (StatusCode::SERVICE_UNAVAILABLE, "model_unavailable"),
        PipelineError::Core(TryonError::EmptyTargetRegion) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_target_region"),
        PipelineError::Core(
            TryonError::InvalidKeypoints(_) | TryonError::ShapeMismatch(_) | TryonError::InvalidGeometry(_) | TryonError::InvalidImage(_),
        )
        | PipelineError::InvalidPose(_)
        | PipelineError::Image { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(serde_json::json!({ "status": "ok", "model_loaded": state.model.is_ok() })).into_response()
}

async fn catalog(State(state): State<Arc<AppState>>) -> Response {
    let items = |v: Vec<(String, String)>| v.into_iter().map(|(id, thumb)| CatalogItem { id, thumb }).collect();
    let c = &state.catalog;
    Json(CatalogResponse {
        persons: items(c.persons.iter().map(|e| (e.id.clone(), e.thumb.clone())).collect()),
        garments: items(c.garments.iter().map(|e| (e.id.clone(), e.thumb.clone())).collect()),
    })
    .into_response()
}

async fn tryon(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: TryonRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", format!("expected {{person_id, garment_id}}: {e}")),
    };
    let Some(person) = state.catalog.person(&req.person_id).cloned() else {
        return error(StatusCode::NOT_FOUND, "unknown_person", format!("no person with id {:?}", req.person_id));
    };
    let Some(garment) = state.catalog.garment(&req.garment_id).cloned() else {
        return error(StatusCode::NOT_FOUND, "unknown_garment", format!("no garment with id {:?}", req.garment_id));
    };
    let model = match &state.model {
        Ok(m) => m.clone(),
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", e.clone()),
    };
    let result = tokio::task::spawn_blocking(move || infer_tryon(&model, &person, &garment)).await;
    match result {
        Ok(Ok(r)) => {
            let g = r.output.geometry();
            let b64 = |png: Vec<u8>| imageio::base64_png(&png);
            Json(TryonResponse {
                person_id: req.person_id,
                garment_id: req.garment_id,
                geometry: GeometryJson { height: g.height, width: g.width },
                output: b64(imageio::encode_rgb(&r.output)),
                seg: b64(imageio::encode_seg(&r.seg)),
                warped_cloth: b64(imageio::encode_rgb(&r.warped_cloth)),
                timing: r.timing.into(),
            })
            .into_response()
        }
        Ok(Err(e)) => {
            let (status, code) = classify(&e);
            error(status, code, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn not_found() -> Response {
    error(StatusCode::NOT_FOUND, "not_found", "no such route")
}

fn cors(origin: &str) -> CorsLayer {
    let allow = match origin {
        "*" => AllowOrigin::any(),
        o => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or_else(|_| HeaderValue::from_static("null"))),
    };
    CorsLayer::new().allow_origin(allow).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>, cors_origin: &str) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/catalog", get(catalog))
        .route("/tryon", post(tryon))
        .fallback(not_found)
        .layer(cors(cors_origin))
        .with_state(state)
}

/// Serve on `listener` until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    cors_origin: &str,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, cors_origin)).with_graceful_shutdown(shutdown).await
}
