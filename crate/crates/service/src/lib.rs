//! HTTP service for interactive zooming: fused features are computed once per
//! (slice, scale, reference mode, checkpoint) over the whole output grid and
//! only the requested region is decoded.

pub mod cache;
pub mod catalog;

use std::net::SocketAddr;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dualarb::checkpoint::load_checkpoint;
use dualarb::eval::bicubic_resize;
use dualarb::geometry::RefMode;
use dualarb::inference::{prepare_slice, quantize_scale, SCALE_STEPS};
use dualarb::metrics::{psnr, ssim};
use dualarb::model::{Branch, DualArbNet};
use dualarb::render::{error_map, gray_png};
use dualarb::tensor::Plane;
use serde::{Deserialize, Serialize};

pub use cache::{CacheStats, FeatureCache, FeatureCacheKey};
pub use catalog::{Catalog, SliceEntry, VolumeInfo};

/// Smallest window SSIM is defined on.
const SSIM_MIN_SIDE: usize = 11;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub cache_entries: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            min_scale: 1.0,
            max_scale: 8.0,
            cache_entries: 4,
        }
    }
}

/// A loaded checkpoint. Never mutated; reloads replace the whole snapshot.
pub struct ModelSnapshot {
    pub net: DualArbNet<f32>,
    pub hash: String,
    pub path: PathBuf,
}

impl ModelSnapshot {
    pub fn load(path: &Path) -> dualarb::Result<Self> {
        let ck = load_checkpoint(path)?;
        Ok(ModelSnapshot {
            net: ck.state.net,
            hash: ck.hash,
            path: path.to_path_buf(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRequest {
    pub volume_id: String,
    pub slice_id: String,
    /// In target-LR pixels.
    pub roi: Roi,
    pub scale: f64,
    pub ref_mode: RefMode,
    #[serde(default)]
    pub compare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiResponse {
    pub png: String,
    pub h: usize,
    pub w: usize,
    /// Exact scale of the output grid.
    pub scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_ssim: Option<f64>,
}

#[derive(Debug, PartialEq)]
pub enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Unavailable(String),
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn message(&self) -> &str {
        match self {
            ApiError::NotFound(m) | ApiError::Unprocessable(m) | ApiError::Unavailable(m) | ApiError::Internal(m) => m,
        }
    }
}

impl From<dualarb::Error> for ApiError {
    fn from(e: dualarb::Error) -> Self {
        use dualarb::Error as E;
        match e {
            E::Dims(_) | E::InvalidArgument(_) => ApiError::Unprocessable(e.to_string()),
            E::Missing(_) => ApiError::NotFound(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message() });
        (self.status(), Json(body)).into_response()
    }
}

/// Decoded region before encoding, with its ground truth when the output
/// grid coincides with the HR grid.
pub struct Reconstruction {
    pub sr: Plane<f32>,
    pub hr: Option<Plane<f32>>,
    pub baseline: Plane<f32>,
    pub scale: f64,
    pub cache_hit: bool,
}

/// `[round(a * big / n), round(b * big / n))` in integers.
fn map_span(a: usize, b: usize, n: usize, big: usize) -> Range<usize> {
    let f = |v: usize| (2 * v * big + n) / (2 * n);
    f(a)..f(b)
}

pub struct AppState {
    model: RwLock<Option<Arc<ModelSnapshot>>>,
    pub catalog: Catalog,
    pub cache: FeatureCache,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(catalog: Catalog, config: ServiceConfig) -> Self {
        AppState {
            model: RwLock::new(None),
            cache: FeatureCache::new(config.cache_entries),
            catalog,
            config,
        }
    }

    pub fn snapshot(&self) -> Option<Arc<ModelSnapshot>> {
        self.model.read().unwrap().clone()
    }

    /// Replaces the served model in one step; in-flight requests keep the
    /// snapshot they started with.
    pub fn install(&self, snapshot: ModelSnapshot) {
        *self.model.write().unwrap() = Some(Arc::new(snapshot));
    }

    /// Loads `path` (or the current checkpoint path) and installs it.
    pub fn reload(&self, path: Option<&Path>) -> dualarb::Result<String> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None => self
                .snapshot()
                .map(|s| s.path.clone())
                .ok_or_else(|| dualarb::Error::Missing("checkpoint path".into()))?,
        };
        let snap = ModelSnapshot::load(&path)?;
        let hash = snap.hash.clone();
        self.install(snap);
        Ok(hash)
    }

    pub fn reconstruct(&self, req: &RoiRequest) -> Result<Reconstruction, ApiError> {
        let model = self
            .snapshot()
            .ok_or_else(|| ApiError::Unavailable("no model loaded".into()))?;
        let entry = self
            .catalog
            .get(&req.volume_id, &req.slice_id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown slice {}/{}", req.volume_id, req.slice_id)))?;
        let (lo, hi) = (self.config.min_scale, self.config.max_scale);
        if !(req.scale >= lo && req.scale <= hi) {
            return Err(ApiError::Unprocessable(format!(
                "scale {} outside [{lo}, {hi}]",
                req.scale
            )));
        }
        let reference = match req.ref_mode {
            RefMode::Hr => &entry.reference,
            RefMode::Lr => &entry.ref_lr,
            RefMode::Custom => return Err(ApiError::Unprocessable("ref_mode must be lr or hr".into())),
        };
        let (lh, lw) = entry.lr.dims();
        let r = req.roi;
        if r.w == 0 || r.h == 0 || r.x0 + r.w > lw || r.y0 + r.h > lh {
            return Err(ApiError::Unprocessable(format!(
                "roi {r:?} outside the {lh}x{lw} slice"
            )));
        }
        let s = quantize_scale(req.scale);
        let key = FeatureCacheKey {
            volume_id: entry.volume_id.clone(),
            slice_id: entry.slice_id.clone(),
            scale_steps: (s * SCALE_STEPS).round() as u32,
            ref_mode: req.ref_mode,
            checkpoint: model.hash.clone(),
        };
        let net = &model.net;
        let (prep, cache_hit) = self
            .cache
            .get_or_compute(&key, || prepare_slice(net, &entry.lr, Some(reference), s))?;
        let (h, w) = prep.task.hr_dims;
        let rows = map_span(r.y0, r.y0 + r.h, lh, h);
        let cols = map_span(r.x0, r.x0 + r.w, lw, w);
        if rows.is_empty() || cols.is_empty() {
            return Err(ApiError::Unprocessable("roi maps to an empty output region".into()));
        }
        let sr = net.decode_region(&prep, Branch::Target, rows.clone(), cols.clone())?;
        let crop = |p: &Plane<f32>| p.crop(rows.start, cols.start, rows.len(), cols.len());
        let hr = if entry.hr.dims() == (h, w) {
            Some(crop(&entry.hr)?)
        } else {
            None
        };
        let baseline = crop(&bicubic_resize(&entry.lr, (h, w)))?;
        Ok(Reconstruction {
            sr,
            hr,
            baseline,
            scale: prep.task.s_tar.value(),
            cache_hit,
        })
    }

    pub fn respond(&self, req: &RoiRequest) -> Result<(RoiResponse, bool), ApiError> {
        let rec = self.reconstruct(req)?;
        let png = |p: &Plane<f32>| -> Result<String, ApiError> { Ok(B64.encode(gray_png(p, 0.0, 1.0)?)) };
        let mut out = RoiResponse {
            png: png(&rec.sr)?,
            h: rec.sr.h,
            w: rec.sr.w,
            scale: rec.scale,
            psnr: None,
            ssim: None,
            error_png: None,
            error_max: None,
            baseline_png: None,
            baseline_psnr: None,
            baseline_ssim: None,
        };
        if req.compare {
            out.baseline_png = Some(png(&rec.baseline)?);
            if let Some(hr) = &rec.hr {
                let score = |p: &Plane<f32>| -> Result<(f64, Option<f64>), ApiError> {
                    let p = p.map(|v| v.clamp(0.0, 1.0));
                    let q = psnr(&p, hr, 1.0)?;
                    let s = if hr.h >= SSIM_MIN_SIDE && hr.w >= SSIM_MIN_SIDE {
                        Some(ssim(&p, hr)?)
                    } else {
                        None
                    };
                    Ok((q, s))
                };
                let (p, s) = score(&rec.sr)?;
                out.psnr = Some(p);
                out.ssim = s;
                let (p, s) = score(&rec.baseline)?;
                out.baseline_psnr = Some(p);
                out.baseline_ssim = s;
                let em = error_map(&rec.sr.map(|v| v.clamp(0.0, 1.0)), hr)?;
                out.error_max = Some(em.max);
                out.error_png = Some(B64.encode(em.to_png(None)?));
            }
        }
        Ok((out, rec.cache_hit))
    }
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    view: Option<String>,
}

async fn volumes(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "volumes": st.catalog.listing(),
        "lr_scale": st.catalog.lr_scale,
        "scale_bounds": [st.config.min_scale, st.config.max_scale],
        "scale_step": 1.0 / SCALE_STEPS,
    }))
}

async fn slice_png(
    State(st): State<Arc<AppState>>,
    UrlPath((volume, slice)): UrlPath<(String, String)>,
    Query(q): Query<SliceQuery>,
) -> Result<Response, ApiError> {
    let entry = st.catalog.get(&volume, &slice).ok_or_else(|| {
        if st.catalog.has_volume(&volume) {
            ApiError::NotFound(format!("unknown slice {slice} in {volume}"))
        } else {
            ApiError::NotFound(format!("unknown volume {volume}"))
        }
    })?;
    let plane = match q.view.as_deref().unwrap_or("lr") {
        "lr" => &entry.lr,
        "hr" => &entry.hr,
        "ref" => &entry.reference,
        other => return Err(ApiError::Unprocessable(format!("unknown view {other:?}"))),
    };
    let bytes = gray_png(plane, 0.0, 1.0)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn reconstruct(
    State(st): State<Arc<AppState>>,
    body: Result<Json<RoiRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let (resp, hit) = tokio::task::spawn_blocking(move || st.respond(&req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let mut r = Json(resp).into_response();
    r.headers_mut().insert(
        "x-feature-cache",
        HeaderValue::from_static(if hit { "hit" } else { "miss" }),
    );
    Ok(r)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let snap = st.snapshot();
    Json(serde_json::json!({
        "status": "ok",
        "model_loaded": snap.is_some(),
        "checkpoint": snap.as_ref().map(|s| s.hash.clone()),
        "slices": st.catalog.len(),
        "cache": st.cache.stats(),
    }))
}

/// Re-reads the served checkpoint file.
async fn reload(State(st): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let hash = tokio::task::spawn_blocking(move || st.reload(None))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(serde_json::json!({ "checkpoint": hash })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/volumes", get(volumes))
        .route("/api/volumes/{volume}/slices/{slice}", get(slice_png))
        .route("/api/reconstruct", post(reconstruct))
        .route("/api/reload", post(reload))
        .route("/api/health", get(health))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
