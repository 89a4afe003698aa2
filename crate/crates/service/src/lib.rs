//! HTTP front end for the two-stage diminishing pipeline.
//!
//! Endpoints: `GET /v1/health`, `GET /v1/model`, `POST /v1/diminish`.
//! Checkpoints load in the background; until then health answers 503.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, ImageFormat};
use panodr_core::checkpoint::{self, Sidecar};
use panodr_core::geometry::{gnomonic_project, ViewSpec};
use panodr_core::pano::{DiminishMask, Panorama};
pub use panodr_core::pipeline::{run_pipeline, Diminished, Pipeline};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const MIN_HEIGHT: usize = 64;
pub const MAX_HEIGHT: usize = 1024;
const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub generator_ckpt: PathBuf,
    pub structure_ckpt: PathBuf,
    pub port: u16,
    pub queue_depth: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    /// Reads `PANODR_CKPT_G`, `PANODR_CKPT_S`, `PANODR_PORT` (8080),
    /// `PANODR_QUEUE_DEPTH` (4) and `PANODR_CORS_ORIGIN`.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let need = |k: &str| var(k).map(PathBuf::from).ok_or_else(|| format!("{k} is not set"));
        let parse = |k: &str, default: usize| -> Result<usize, String> {
            var(k).map_or(Ok(default), |v| v.parse().map_err(|e| format!("{k}={v}: {e}")))
        };
        let queue_depth = parse("PANODR_QUEUE_DEPTH", 4)?;
        if queue_depth == 0 {
            return Err("PANODR_QUEUE_DEPTH must be >= 1".into());
        }
        Ok(ServiceConfig {
            generator_ckpt: need("PANODR_CKPT_G")?,
            structure_ckpt: need("PANODR_CKPT_S")?,
            port: u16::try_from(parse("PANODR_PORT", 8080)?).map_err(|e| format!("PANODR_PORT: {e}"))?,
            queue_depth,
            cors_origin: var("PANODR_CORS_ORIGIN"),
        })
    }
}

/// Everything served once the checkpoints are in memory.
pub struct Loaded {
    pub pipeline: Pipeline,
    pub model_id: String,
    pub metadata: Value,
}

impl Loaded {
    pub fn new(pipeline: Pipeline, generator: &Sidecar, structure: &Sidecar) -> Self {
        let model_id = format!("g{}-s{}", &generator.fingerprint[..12], &structure.fingerprint[..12]);
        let metadata = json!({
            "model_id": model_id,
            "guided": pipeline.guided,
            "size_unit": pipeline.size_unit(),
            "generator": sidecar_summary(generator),
            "structure": sidecar_summary(structure),
            "conventions": conventions(),
        });
        Loaded { pipeline, model_id, metadata }
    }

    pub fn from_checkpoints(generator: &std::path::Path, structure: &std::path::Path) -> panodr_core::Result<Self> {
        let pipeline = Pipeline::load(generator, structure)?;
        let (_, gs) = checkpoint::load(generator)?;
        let (_, ss) = checkpoint::load(structure)?;
        Ok(Loaded::new(pipeline, &gs, &ss))
    }
}

fn sidecar_summary(s: &Sidecar) -> Value {
    json!({
        "kind": s.kind,
        "fingerprint": s.fingerprint,
        "step": s.step,
        "param_count": s.param_count,
        "config": s.config,
        "metrics": s.metrics,
    })
}

/// Equirect and perspective conventions shared with clients.
pub fn conventions() -> Value {
    json!({
        "world": "z up; longitude 0 looks along +y; longitude increases toward +x",
        "direction": "(cos(lat) sin(lon), cos(lat) cos(lon), sin(lat))",
        "equirect": {
            "aspect": "width = 2 * height",
            "lon_of_column": "lon = 2*pi*(u + 0.5)/W - pi",
            "lat_of_row": "lat = pi/2 - pi*(v + 0.5)/H",
            "sampling": "bilinear, pixel centers at integer coordinates, columns wrap, rows clamp"
        },
        "perspective": {
            "view_spec": {"center": {"lon": "radians", "lat": "radians"}, "fov_deg": "horizontal, in (0, 170)", "out_w": "pixels", "out_h": "pixels"},
            "basis": "forward = direction(center); right = (cos lon, -sin lon, 0); up = right x forward",
            "ray": "forward + x*right + y*up",
            "x_of_column": "x = (2*(i + 0.5)/out_w - 1) * tan(fov/2)",
            "y_of_row": "y = (1 - 2*(j + 0.5)/out_h) * tan(fov/2) * out_h/out_w"
        },
        "layout_labels": {"ceiling": 0, "wall": 1, "floor": 2},
        "mask": "8-bit grayscale, value >= 128 marks pixels to remove"
    })
}

enum Phase {
    Loading,
    Ready(Arc<Loaded>),
    Failed(String),
}

#[derive(Clone)]
pub struct AppState {
    phase: Arc<RwLock<Phase>>,
    queue: Arc<Semaphore>,
    started: Instant,
}

impl AppState {
    pub fn new(queue_depth: usize) -> Self {
        AppState { phase: Arc::new(RwLock::new(Phase::Loading)), queue: Arc::new(Semaphore::new(queue_depth.max(1))), started: Instant::now() }
    }

    pub fn install(&self, loaded: Loaded) {
        *self.phase.write().expect("state lock") = Phase::Ready(Arc::new(loaded));
    }

    pub fn fail(&self, reason: String) {
        *self.phase.write().expect("state lock") = Phase::Failed(reason);
    }

    fn ready(&self) -> Option<Arc<Loaded>> {
        match &*self.phase.read().expect("state lock") {
            Phase::Ready(l) => Some(l.clone()),
            _ => None,
        }
    }

    /// Loads both checkpoints on a blocking thread and installs them.
    pub fn spawn_loader(&self, generator: PathBuf, structure: PathBuf) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || match Loaded::from_checkpoints(&generator, &structure) {
            Ok(l) => {
                log::info!("model {} ready", l.model_id);
                state.install(l);
            }
            Err(e) => {
                log::error!("checkpoint load failed: {e}");
                state.fail(e.to_string());
            }
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<&'static str>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&'static str>, message: impl Into<String>) -> Self {
        ApiError { status, field, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "field": self.field}))).into_response()
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct DiminishOptions {
    pub return_layout: bool,
    pub perspective_views: Vec<ViewSpec>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct DiminishRequest {
    /// Base64 PNG, 8-bit RGB.
    pub panorama: String,
    /// Base64 PNG, 8-bit grayscale.
    pub mask: String,
    #[serde(default)]
    pub options: DiminishOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiminishResponse {
    pub result: String,
    pub layout: Option<String>,
    pub views: Vec<String>,
    pub timing_ms: f64,
    pub model_id: String,
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(v) => AllowOrigin::exact(v),
        None => AllowOrigin::from(Any),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model))
        .route("/v1/diminish", post(diminish))
        .layer(DefaultBodyLimit::max(64 << 20))
        .layer(cors)
        .with_state(state)
}

async fn health(State(st): State<AppState>) -> Response {
    let uptime = st.started.elapsed().as_secs_f64();
    match &*st.phase.read().expect("state lock") {
        Phase::Ready(l) => (StatusCode::OK, Json(json!({"status": "ok", "model_id": l.model_id, "uptime_s": uptime}))).into_response(),
        Phase::Loading => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading", "model_id": null, "uptime_s": uptime}))).into_response(),
        Phase::Failed(e) => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "error", "error": e, "model_id": null, "uptime_s": uptime}))).into_response()
        }
    }
}

async fn model(State(st): State<AppState>) -> Result<Json<Value>, ApiError> {
    let l = st.ready().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "model not loaded"))?;
    Ok(Json(l.metadata.clone()))
}

fn decode_png(field: &'static str, b64: &str) -> Result<DynamicImage, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Some(field), format!("base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, Some(field), format!("PNG: {e}")))
}

fn unprocessable(field: &'static str, msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, Some(field), msg)
}

/// Decodes and checks a request without touching the model.
pub fn validate(req: &DiminishRequest) -> Result<(Panorama, DiminishMask), ApiError> {
    let pano = decode_png("panorama", &req.panorama)?.to_rgb8();
    let (w, h) = (pano.width() as usize, pano.height() as usize);
    if w != 2 * h {
        return Err(unprocessable("panorama", format!("width {w} must equal 2 x height {h}")));
    }
    if !(MIN_HEIGHT..=MAX_HEIGHT).contains(&h) {
        return Err(unprocessable("panorama", format!("height {h} outside [{MIN_HEIGHT}, {MAX_HEIGHT}]")));
    }
    let mask = decode_png("mask", &req.mask)?.to_luma8();
    if (mask.width() as usize, mask.height() as usize) != (w, h) {
        return Err(unprocessable("mask", format!("mask is {}x{}, panorama is {w}x{h}", mask.width(), mask.height())));
    }
    for (i, v) in req.options.perspective_views.iter().enumerate() {
        v.validate().map_err(|e| unprocessable("options.perspective_views", format!("view {i}: {e}")))?;
        if v.out_w * v.out_h > 2048 * 2048 {
            return Err(unprocessable("options.perspective_views", format!("view {i}: {}x{} too large", v.out_w, v.out_h)));
        }
    }
    let pano = Panorama::from_rgb8(&pano).map_err(|e| unprocessable("panorama", e.to_string()))?;
    let bits = mask.into_raw().into_iter().map(|v| u8::from(v >= MASK_THRESHOLD)).collect();
    let mask = DiminishMask::new(h, w, bits).map_err(|e| unprocessable("mask", e.to_string()))?;
    Ok((pano, mask))
}

fn png_b64(img: &DynamicImage) -> Result<String, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?;
    Ok(B64.encode(buf.into_inner()))
}

async fn diminish(State(st): State<AppState>, body: axum::body::Bytes) -> Result<Json<DiminishResponse>, ApiError> {
    let t0 = Instant::now();
    let req: DiminishRequest = serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, None, format!("JSON: {e}")))?;
    let (pano, mask) = validate(&req)?;
    let loaded = st.ready().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "model not loaded"))?;
    let _permit = st.queue.clone().try_acquire_owned().map_err(|_| ApiError::new(StatusCode::TOO_MANY_REQUESTS, None, "work queue full"))?;
    let opts = req.options;
    let model_id = loaded.model_id.clone();
    let job = tokio::task::spawn_blocking(move || -> Result<(String, Option<String>, Vec<String>), ApiError> {
        let internal = |e: panodr_core::PanoError| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string());
        let out = run_pipeline(&loaded.pipeline, &pano, &mask).map_err(internal)?;
        // views are rendered from the 8-bit result the client receives
        let comp = out.composite.quantized();
        let result = png_b64(&DynamicImage::ImageRgb8(comp.to_rgb8()))?;
        let layout = if opts.return_layout {
            let img = image::GrayImage::from_raw(out.layout.width() as u32, out.layout.height() as u32, out.layout.labels().to_vec()).expect("sized buffer");
            Some(png_b64(&DynamicImage::ImageLuma8(img))?)
        } else {
            None
        };
        let views = opts
            .perspective_views
            .iter()
            .map(|v| gnomonic_project(&comp, v).map_err(internal).and_then(|img| png_b64(&DynamicImage::ImageRgb8(img.to_rgb8()))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((result, layout, views))
    });
    let (result, layout, views) = job.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))??;
    Ok(Json(DiminishResponse { result, layout, views, timing_ms: t0.elapsed().as_secs_f64() * 1e3, model_id }))
}
