mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::tiny_config;
use tower::ServiceExt;
use tryon_pipeline::service::{router, AppState, CatalogResponse, ErrorResponse, TryonResponse};
use tryon_pipeline::train::{train, Stage, TrainOptions};
use tryon_pipeline::{imageio, PipelineConfig};

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone(), "*").oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn post(body: &str) -> Request<Body> {
    Request::post("/tryon").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorResponse>(body).unwrap().error.code
}

fn trained(dir: &std::path::Path) -> PipelineConfig {
    let cfg = tiny_config(dir);
    train(&cfg, Stage::Shape, TrainOptions::default(), |_| {}).unwrap();
    train(&cfg, Stage::Appearance, TrainOptions::default(), |_| {}).unwrap();
    cfg
}

#[tokio::test]
async fn catalog_and_tryon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let state = Arc::new(AppState::from_config(&cfg).unwrap());

    let (s, body) = call(&state, get("/health")).await;
    assert_eq!(s, StatusCode::OK);
    let health: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_loaded"], true);

    let (s, body) = call(&state, get("/catalog")).await;
    assert_eq!(s, StatusCode::OK);
    let cat: CatalogResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((cat.persons.len(), cat.garments.len()), (3, 3));
    assert!(cat.persons[0].thumb.starts_with("data:image/png;base64,"));

    let req = format!(r#"{{"person_id":"{}","garment_id":"{}"}}"#, cat.persons[0].id, cat.garments[2].id);
    let (s, body) = call(&state, post(&req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: TryonResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.geometry.height, r.geometry.width), (48, 32));
    let out = imageio::decode_rgb(&imageio::decode_base64(&r.output).unwrap()).unwrap();
    assert_eq!(out.geometry(), cfg.geometry().unwrap());
    assert!(r.timing.total_ms >= r.timing.shape_ms);
}

#[tokio::test]
async fn error_responses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let state = Arc::new(AppState::from_config(&cfg).unwrap());
    let id = state_person(&state).await;

    let (s, body) = call(&state, post(&format!(r#"{{"person_id":"nobody","garment_id":"{id}"}}"#))).await;
    assert_eq!((s, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_person"));
    let (s, body) = call(&state, post(&format!(r#"{{"person_id":"{id}","garment_id":"nothing"}}"#))).await;
    assert_eq!((s, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_garment"));
    let (s, body) = call(&state, post("{not json")).await;
    assert_eq!((s, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));
    let (s, body) = call(&state, get("/nowhere")).await;
    assert_eq!((s, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

async fn state_person(state: &Arc<AppState>) -> String {
    let (_, body) = call(state, get("/catalog")).await;
    serde_json::from_slice::<CatalogResponse>(&body).unwrap().persons[0].id.clone()
}

#[tokio::test]
async fn untrained_service_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let state = Arc::new(AppState::from_config(&cfg).unwrap());
    let (_, body) = call(&state, get("/health")).await;
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap()["model_loaded"], false);
    let id = state_person(&state).await;
    let (s, body) = call(&state, post(&format!(r#"{{"person_id":"{id}","garment_id":"{id}"}}"#))).await;
    assert_eq!((s, error_code(&body).as_str()), (StatusCode::SERVICE_UNAVAILABLE, "model_unavailable"));
}

#[tokio::test]
async fn cors_headers_follow_config() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::from_config(&tiny_config(dir.path())).unwrap());
    let req = Request::get("/health").header("origin", "http://ui.example").body(Body::empty()).unwrap();
    let resp = router(state.clone(), "http://ui.example").oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://ui.example");
}
