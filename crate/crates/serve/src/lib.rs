//! HTTP inference service over a loaded checkpoint.
//!
//! Routes:
//! - `POST /volumes` uploads a container (`u32le` header length, JSON header,
//!   f32le payload) and returns `{volume_id}`.
//! - `GET /volumes/{id}` returns the stored header.
//! - `GET /volumes/{id}/slices/{d}?modality=m` renders one slice as 8-bit PNG.
//! - `POST /segment` runs the model on the 4-slice window around a slice.
//! - `GET /healthz`.

pub mod rle;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use volseg::checkpoint::{checkpoint_id, content_hash, decode_checkpoint};
use volseg::volumes::{decode_container, Modality, VolumeHeader};
use volseg::{Model, Prompt, PromptBox, SliceGroup, Volume, GROUP_SIZE};

/// Uploads are whole volumes; 1 GiB covers 240×240×155×4 f32 with room.
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct CachedVolume {
    pub header: VolumeHeader,
    /// As uploaded; used for display.
    pub raw: Volume,
    /// Normalized; fed to the model.
    pub normalized: Volume,
}

pub struct AppState {
    model: Arc<Model>,
    checkpoint_id: String,
    threshold: f64,
    volumes: RwLock<HashMap<String, Arc<CachedVolume>>>,
}

impl AppState {
    pub fn new(model: Model, checkpoint_id: impl Into<String>, threshold: f64) -> Self {
        Self {
            model: Arc::new(model),
            checkpoint_id: checkpoint_id.into(),
            threshold,
            volumes: RwLock::new(HashMap::new()),
        }
    }

    pub fn from_checkpoint(path: &Path, threshold: f64) -> volseg::Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| volseg::Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (model, _) = decode_checkpoint::<f32>(&bytes, &path.display().to_string())?;
        Ok(Self::new(model, checkpoint_id(&bytes), threshold))
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    /// Decodes, normalizes and caches an upload; identical bytes give the
    /// same id.
    pub fn insert_volume(&self, bytes: &[u8]) -> ApiResult<String> {
        let id = content_hash(bytes)[..16].to_string();
        if self.volume(&id).is_ok() {
            return Ok(id);
        }
        let (header, raw) = decode_container(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        let normalized = raw
            .normalize()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        let cached = Arc::new(CachedVolume {
            header,
            raw,
            normalized,
        });
        self.volumes
            .write()
            .expect("volume cache poisoned")
            .entry(id.clone())
            .or_insert(cached);
        Ok(id)
    }

    pub fn volume(&self, id: &str) -> ApiResult<Arc<CachedVolume>> {
        self.volumes
            .read()
            .expect("volume cache poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown volume {id}")))
    }

    /// Synchronous core of `POST /segment`.
    pub fn segment(&self, req: &SegmentRequest) -> ApiResult<SegmentResponse> {
        let started = Instant::now();
        let cached = self.volume(&req.volume_id)?;
        let dims = cached.normalized.dims();
        let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
        if req.slice_index >= dims.depth {
            return Err(unprocessable(format!(
                "slice_index {} outside [0, {}]",
                req.slice_index,
                dims.depth - 1
            )));
        }
        let enc = &self.model.config().encoder;
        if (enc.image_height, enc.image_width) != (dims.height, dims.width) {
            return Err(unprocessable(format!(
                "volume slices are {}×{}, checkpoint expects {}×{}",
                dims.height, dims.width, enc.image_height, enc.image_width
            )));
        }
        let [x0, y0, x1, y1] = req.bbox;
        let (start, window) = window_around(req.slice_index, dims.depth);
        let position = req.slice_index - start;
        let prompt_box = PromptBox::from_corners(position, x0, y0, x1, y1);
        if !prompt_box.fits(dims.height, dims.width) {
            return Err(unprocessable(format!(
                "box {:?} outside the {}×{} image",
                req.bbox, dims.width, dims.height
            )));
        }
        let group = SliceGroup::<f32>::from_volume(&cached.normalized, window)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let logits = self
            .model
            .predict(&group, &Prompt::Box(prompt_box))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let plane = dims.slice_len();
        let probs: Vec<f32> = logits.data()[position * plane..(position + 1) * plane]
            .iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        let mask: Vec<u8> = probs.iter().map(|p| u8::from(f64::from(*p) >= self.threshold)).collect();
        let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for p in &probs {
            min = min.min(*p);
            max = max.max(*p);
            sum += f64::from(*p);
        }
        Ok(SegmentResponse {
            rle: rle::encode(&mask),
            height: dims.height,
            width: dims.width,
            stats: ProbStats {
                min,
                max,
                mean: (sum / plane as f64) as f32,
            },
            checkpoint_id: self.checkpoint_id.clone(),
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// First slice and indices of the window holding `d`. Windows sit on the
/// stride-4 grid, pulled back at the far end so every index is real; volumes
/// shallower than 4 repeat their last slice.
pub fn window_around(d: usize, depth: usize) -> (usize, [usize; GROUP_SIZE]) {
    let start = (GROUP_SIZE * (d / GROUP_SIZE)).min(depth.max(GROUP_SIZE) - GROUP_SIZE);
    (start, std::array::from_fn(|i| (start + i).min(depth - 1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub volume_id: String,
    pub slice_index: usize,
    /// `[x0, y0, x1, y1]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub rle: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub stats: ProbStats,
    pub checkpoint_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub volume_id: String,
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    modality: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/volumes", post(upload))
        .route("/volumes/{id}", get(metadata))
        .route("/volumes/{id}/slices/{d}", get(slice_png))
        .route("/segment", post(segment))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "checkpoint_id": state.checkpoint_id }))
}

async fn upload(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult<Json<UploadResponse>> {
    let id = blocking(move || state.insert_volume(&body)).await?;
    Ok(Json(UploadResponse { volume_id: id }))
}

async fn metadata(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<VolumeHeader>> {
    Ok(Json(state.volume(&id)?.header.clone()))
}

async fn slice_png(
    State(state): State<Arc<AppState>>,
    UrlPath((id, d)): UrlPath<(String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let cached = state.volume(&id)?;
    let dims = cached.raw.dims();
    if d >= dims.depth {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("slice {d} outside depth {}", dims.depth),
        ));
    }
    let m = match q.modality.as_deref() {
        None => 0,
        Some(s) => match s.parse::<usize>() {
            Ok(i) if i < Modality::ALL.len() => i,
            Ok(i) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("modality index {i} out of range"))),
            Err(_) => Modality::parse(s)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
                .index(),
        },
    };
    let pixels = window_slice(cached.raw.slice(m, d));
    let png = encode_png(&pixels, dims.width, dims.height)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn segment(State(state): State<Arc<AppState>>, Json(req): Json<SegmentRequest>) -> ApiResult<Json<SegmentResponse>> {
    Ok(Json(blocking(move || state.segment(&req)).await?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Min-max window to 0..=255; a constant slice renders mid-gray.
pub fn window_slice(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

fn encode_png(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| e.to_string())?;
    writer.write_image_data(pixels).map_err(|e| e.to_string())?;
    writer.finish().map_err(|e| e.to_string())?;
    Ok(out)
}
