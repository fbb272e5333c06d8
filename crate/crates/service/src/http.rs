//! HTTP+JSON API over [`Service`].

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use meshqa_core::gltf_io::load_mesh;
use meshqa_core::manifest::parse_line;
use meshqa_core::render::{encode_png, render_stack, CameraPlan, RenderOptions, ViewStack};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ServiceError;
use crate::model::SCHEMA_VERSION;
use crate::service::Service;

/// Header carrying the caller's annotator id.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
/// Header carrying the schema version on non-JSON responses.
pub const SCHEMA_HEADER: &str = "x-schema-version";

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/batches", post(create_batch).get(list_batches))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/tasks/next", post(next_task))
        .route("/batches/{id}/validate", post(validate))
        .route("/batches/{id}/discrepancies", get(discrepancies))
        .route("/batches/{id}/annotations/{object_id}", get(annotations))
        .route("/annotations", post(submit))
        .route("/discrepancies/{id}/resolve", post(resolve))
        .route("/export", get(export))
        .route("/objects/{id}/model.glb", get(model_glb))
        .route("/objects/{id}/views/{file}", get(view_png))
        .with_state(service)
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": {"code": self.code(), "message": self.to_string()},
        });
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ServiceError>;

fn ok(status: StatusCode, mut body: Value) -> ApiResult {
    body["schema_version"] = json!(SCHEMA_VERSION);
    Ok((status, Json(body)).into_response())
}

fn annotator(headers: &HeaderMap) -> Option<String> {
    headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string)
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    let mut r = Response::new(Body::from(bytes));
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    r.headers_mut().insert(SCHEMA_HEADER, HeaderValue::from(SCHEMA_VERSION));
    r
}

async fn health() -> ApiResult {
    ok(StatusCode::OK, json!({"status": "ok"}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBatch {
    batch_id: Option<String>,
    object_ids: Vec<String>,
    validation_fraction: Option<f64>,
}

async fn create_batch(State(svc): State<Arc<Service>>, Json(req): Json<CreateBatch>) -> ApiResult {
    let batch = svc.create_batch(req.batch_id, req.object_ids, req.validation_fraction)?;
    ok(StatusCode::CREATED, json!({ "batch": batch }))
}

async fn list_batches(State(svc): State<Arc<Service>>) -> ApiResult {
    ok(StatusCode::OK, json!({ "batches": svc.batches() }))
}

async fn get_batch(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let (batch, progress) = svc.batch(&id)?;
    ok(StatusCode::OK, json!({ "batch": batch, "progress": progress }))
}

async fn next_task(State(svc): State<Arc<Service>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult {
    let who = annotator(&headers)
        .ok_or_else(|| ServiceError::InvalidRequest(format!("missing {ANNOTATOR_HEADER} header")))?;
    let (assignment, state) = svc.next_task(&id, &who)?;
    ok(StatusCode::OK, json!({ "assignment": assignment, "batch_state": state }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submit {
    assignment_id: String,
    record: Value,
}

async fn submit(State(svc): State<Arc<Service>>, headers: HeaderMap, Json(req): Json<Submit>) -> ApiResult {
    let line = serde_json::to_string(&req.record).expect("json value serializes");
    let (record, _) = parse_line(&line).map_err(|e| ServiceError::SchemaViolation(vec![e.to_string()]))?;
    let ack = svc.submit(&req.assignment_id, annotator(&headers).as_deref(), record)?;
    ok(StatusCode::CREATED, json!({ "ack": ack }))
}

async fn annotations(State(svc): State<Arc<Service>>, Path((id, object_id)): Path<(String, String)>) -> ApiResult {
    let versions: Vec<Value> = svc
        .annotations(&id, &object_id)?
        .into_iter()
        .map(|s| {
            let record: Value = serde_json::from_str(&s.line).expect("stored lines are JSON");
            json!({
                "version": s.version,
                "role": s.role,
                "annotator_id": s.annotator_id,
                "assignment_id": s.assignment_id,
                "submitted_at": s.submitted_at,
                "record": record,
            })
        })
        .collect();
    ok(StatusCode::OK, json!({ "object_id": object_id, "versions": versions }))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ValidateReq {
    #[serde(default)]
    seed: u64,
}

async fn validate(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Option<Json<ValidateReq>>) -> ApiResult {
    let seed = body.map(|b| b.0.seed).unwrap_or_default();
    let (sample, state) = svc.sample_for_validation(&id, seed)?;
    let slots: Vec<Value> = sample.iter().map(|o| json!({"object_id": o, "role": "VALIDATOR"})).collect();
    ok(StatusCode::OK, json!({ "seed": seed, "assignments": slots, "batch_state": state }))
}

async fn discrepancies(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, json!({ "discrepancies": svc.discrepancies(&id)? }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Resolve {
    value: Value,
}

async fn resolve(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(req): Json<Resolve>) -> ApiResult {
    let (d, state) = svc.resolve(&id, req.value)?;
    ok(StatusCode::OK, json!({ "discrepancy": d, "batch_state": state }))
}

#[derive(Deserialize)]
struct ExportQuery {
    /// Comma-separated batch ids.
    batch: String,
    #[serde(default)]
    resolved_only: bool,
}

async fn export(State(svc): State<Arc<Service>>, Query(q): Query<ExportQuery>) -> ApiResult {
    let ids: Vec<String> = q.batch.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(ServiceError::InvalidRequest("no batch ids given".into()));
    }
    let text = svc.export(&ids, q.resolved_only)?;
    Ok(bytes_response("application/x-ndjson", text.into_bytes()))
}

fn asset_path(svc: &Service, object_id: &str) -> Result<std::path::PathBuf, ServiceError> {
    let dir = svc.config.assets_dir.as_ref().ok_or_else(|| ServiceError::UnknownObject(object_id.into()))?;
    if object_id.is_empty() || object_id.contains(['/', '\\']) || object_id.starts_with('.') {
        return Err(ServiceError::InvalidRequest(format!("invalid object id `{object_id}`")));
    }
    let p = dir.join(format!("{object_id}.glb"));
    if !p.is_file() {
        return Err(ServiceError::UnknownObject(object_id.into()));
    }
    Ok(p)
}

async fn model_glb(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let p = asset_path(&svc, &id)?;
    let bytes = tokio::fs::read(&p).await?;
    Ok(bytes_response("model/gltf-binary", bytes))
}

fn view_stack(svc: &Service, object_id: &str) -> Result<Arc<ViewStack>, ServiceError> {
    if let Some(s) = svc.views.lock().unwrap().get(object_id) {
        return Ok(s.clone());
    }
    let p = asset_path(svc, object_id)?;
    let mesh = load_mesh(&p).map_err(|e| ServiceError::InvalidRequest(format!("{}: {e}", p.display())))?;
    let plan = CameraPlan { n: svc.config.views, seed: svc.config.view_seed, ..CameraPlan::default() };
    let opts = RenderOptions { resolution: svc.config.view_resolution, edge_overlay: false };
    let stack = Arc::new(render_stack(&mesh, &plan, &opts).map_err(|e| ServiceError::InvalidRequest(e.to_string()))?);
    svc.views.lock().unwrap().insert(object_id.to_string(), stack.clone());
    Ok(stack)
}

async fn view_png(State(svc): State<Arc<Service>>, Path((id, file)): Path<(String, String)>) -> ApiResult {
    let k: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ServiceError::InvalidRequest(format!("expected <k>.png, got `{file}`")))?;
    let svc2 = svc.clone();
    let stack = tokio::task::spawn_blocking(move || view_stack(&svc2, &id))
        .await
        .map_err(|e| ServiceError::InvalidRequest(e.to_string()))??;
    let img = stack.images.get(k).ok_or_else(|| ServiceError::UnknownObject(format!("view {k}")))?;
    Ok(bytes_response("image/png", encode_png(img)))
}

/// Serves the API until ctrl-c.
pub async fn serve(service: Arc<Service>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
