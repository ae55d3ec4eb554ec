//! HTTP service: canvas validation, collage preview and generation.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use layerforge_core::canvas::{compose_collage, validate_canvas, LayeredCanvas};
use layerforge_core::manifest::{encode_png_rgb, manifest_value, parse_manifest, parse_manifest_value};
use layerforge_core::model::{Model, ModelError};
use layerforge_core::sampler::{euler_sample, SampleConfig, SampleError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub const BODY_LIMIT: usize = 16 * 1024 * 1024;
pub const DEFAULT_MAX_PARALLEL: usize = 2;
/// Upper bound on Euler steps accepted per request.
pub const MAX_STEPS: usize = 1000;

struct AppState {
    model: Model,
    step: u64,
    permits: Semaphore,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<SampleError> for ApiError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Canvas(violations) => violations_error(&violations),
            SampleError::NoSteps => Self::bad_request(e.to_string()),
            SampleError::Model(
                ModelError::UnknownPrompt { .. } | ModelError::LayerAxis { .. } | ModelError::Timestep(_),
            ) => Self::bad_request(e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

fn violations_error(violations: &[layerforge_core::canvas::Violation]) -> ApiError {
    let message = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
    ApiError {
        status: StatusCode::BAD_REQUEST,
        body: json!({ "error": format!("invalid canvas: {message}"), "violations": violations }),
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

pub fn router(model: Model, step: u64, max_parallel: usize) -> Router {
    let state = Arc::new(AppState {
        model,
        step,
        permits: Semaphore::new(max_parallel.max(1)),
    });
    Router::new()
        .route("/health", get(health))
        .route("/canvas/validate", post(validate))
        .route("/canvas/collage", post(collage))
        .route("/generate", post(generate))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") })
        .method_not_allowed_fallback(|| async { ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed") })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let c = &state.model.config;
    Json(json!({
        "status": "ok",
        "model": {
            "d_model": c.d_model,
            "n_heads": c.n_heads,
            "n_blocks": c.n_blocks,
            "patch": c.patch,
            "lora_rank": c.lora_rank,
            "parameters": state.model.weights.numel() + state.model.adapter.numel(),
            "step": state.step,
        }
    }))
}

fn parse_canvas(body: &[u8]) -> Result<LayeredCanvas, ApiError> {
    parse_manifest(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Returns the canonical manifest of a valid canvas.
async fn validate(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult {
    let canvas = parse_canvas(&body?)?;
    let violations = validate_canvas(&canvas, state.model.config.patch);
    if !violations.is_empty() {
        return Err(violations_error(&violations));
    }
    Ok(Json(json!({ "violations": [], "manifest": manifest_value(&canvas) })))
}

async fn collage(body: Result<Bytes, BytesRejection>) -> ApiResult {
    let canvas = parse_canvas(&body?)?;
    let img = compose_collage(&canvas).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!({
        "width": img.width(),
        "height": img.height(),
        "png": B64.encode(encode_png_rgb(&img)),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub canvas: Value,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    SampleConfig::default().steps
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub id: String,
    pub locked: bool,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub png: String,
    pub condition_tokens: usize,
    pub layers: Vec<LayerTokens>,
    pub steps: usize,
    pub seed: u64,
    pub elapsed_ms: u64,
}

/// Output image plus token accounting, shared with the `generate` command.
pub fn run_generation(model: &Model, canvas: &LayeredCanvas, cfg: &SampleConfig) -> Result<(Vec<u8>, usize, Vec<LayerTokens>), SampleError> {
    let sample = euler_sample(model, canvas, model.config.patch, cfg)?;
    let layers = canvas
        .layers_by_z()
        .into_iter()
        .zip(sample.cond.per_layer_counts())
        .map(|(layer, (id, tokens))| LayerTokens {
            id,
            locked: layer.locked,
            tokens,
        })
        .collect();
    Ok((encode_png_rgb(&sample.image), sample.cond.len(), layers))
}

async fn generate(State(state): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> ApiResult {
    let body = body?;
    let req: GenerateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    if req.steps == 0 || req.steps > MAX_STEPS {
        return Err(ApiError::bad_request(format!("steps must be in 1..={MAX_STEPS}, got {}", req.steps)));
    }
    let canvas = parse_manifest_value(req.canvas).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let violations = validate_canvas(&canvas, state.model.config.patch);
    if !violations.is_empty() {
        return Err(violations_error(&violations));
    }
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError::internal("service is shutting down"))?;
    let cfg = SampleConfig {
        steps: req.steps,
        seed: req.seed,
    };
    let worker = Arc::clone(&state);
    let start = Instant::now();
    let (png, condition_tokens, layers) = tokio::task::spawn_blocking(move || run_generation(&worker.model, &canvas, &cfg))
        .await
        .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;
    let response = GenerateResponse {
        png: B64.encode(png),
        condition_tokens,
        layers,
        steps: req.steps,
        seed: req.seed,
        elapsed_ms: start.elapsed().as_millis() as u64,
    };
    Ok(Json(serde_json::to_value(response).map_err(|e| ApiError::internal(e.to_string()))?))
}
