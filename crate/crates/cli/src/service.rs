//! Annotation service: sessions that accumulate prompts and re-run the
//! pipeline after every change.
//!
//! Mutations use optimistic concurrency. A request reads the session
//! revision, runs the pipeline without holding any lock, and commits only if
//! the revision is still the one it started from; otherwise the client gets
//! 409 with the current revision and retries.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use forge_core::io::{
    decode_image_png, encode_image_png, encode_mask_png, load_image, prompt_rows, read_prompt_rows,
    rle_encode, save_mask, validate_image_id, write_prompt_rows, DatasetManifest, Rle,
};
use forge_core::pipeline::{run_image, PipelineConfig};
use forge_core::postprocess::Postprocessed;
use forge_core::saliency_backend::SaliencyBackend;
use forge_core::types::{BinaryMask, BoundingBox, Prompt, PromptKind, PromptSet, RasterImage};
use forge_core::ForgeError;

pub const LABEL_DIR: &str = "labels";
pub const PROMPTS_FILE: &str = "prompts.csv";
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

struct Session {
    image_id: String,
    image: Arc<RasterImage>,
    prompts: PromptSet,
    revision: u64,
    /// Pipeline result for `prompts` at `revision`; absent until the first
    /// mutation.
    last: Option<Arc<Postprocessed>>,
}

impl Session {
    fn label(&self) -> BinaryMask {
        match &self.last {
            Some(p) => p.label.clone(),
            None => BinaryMask::zeros(self.image.width(), self.image.height())
                .expect("session images are non-empty"),
        }
    }
}

pub struct AppState {
    backend: Arc<dyn SaliencyBackend>,
    cfg: PipelineConfig,
    out_dir: PathBuf,
    manifest: Option<DatasetManifest>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    /// Serializes writes to the shared prompt CSV.
    finalize: Mutex<()>,
}

impl AppState {
    pub fn new(
        backend: Arc<dyn SaliencyBackend>,
        cfg: PipelineConfig,
        out_dir: impl Into<PathBuf>,
        manifest: Option<DatasetManifest>,
    ) -> Self {
        Self {
            backend,
            cfg,
            out_dir: out_dir.into(),
            manifest,
            sessions: RwLock::new(HashMap::new()),
            finalize: Mutex::new(()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

fn lock(s: &Mutex<Session>) -> std::sync::MutexGuard<'_, Session> {
    s.lock().unwrap_or_else(|e| e.into_inner())
}

/// Builds the `/v1` router, optionally serving a static UI bundle at `/`.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/images", get(list_images))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image.png", get(image_png))
        .route("/sessions/{id}/prompts", post(add_prompt))
        .route("/sessions/{id}/prompts/last", delete(undo_prompt))
        .route("/sessions/{id}/label.png", get(label_png))
        .route("/sessions/{id}/finalize", post(finalize))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    let app = Router::new().nest("/v1", api);
    match ui_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": code, "detail": detail.into() }),
        }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    fn conflict(revision: u64) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": "conflict",
                "detail": "session changed since the given revision",
                "revision": revision,
            }),
        }
    }
}

impl From<ForgeError> for ApiError {
    fn from(e: ForgeError) -> Self {
        let detail = e.to_string();
        match e {
            ForgeError::Coordinate {
                x,
                y,
                width,
                height,
                ..
            } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({
                    "error": "out_of_bounds",
                    "detail": detail,
                    "x": x,
                    "y": y,
                    "width": width,
                    "height": height,
                }),
            },
            ForgeError::DuplicatePrompt { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "duplicate_prompt", detail)
            }
            ForgeError::Transport { .. }
            | ForgeError::Contract(_)
            | ForgeError::Io { .. }
            | ForgeError::Format { .. } => Self::new(StatusCode::BAD_GATEWAY, "backend", detail),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------------------
// Wire types

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Manifest image, or the name given to an uploaded image.
    #[serde(default)]
    pub image_id: Option<String>,
    /// Base64-encoded PNG.
    #[serde(default)]
    pub png_base64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddPrompt {
    /// Signed so that negative clicks get a 422 instead of a parse error.
    pub x: i64,
    pub y: i64,
    #[serde(default)]
    pub kind: PromptKind,
    /// Revision the client last saw; a stale value yields 409.
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub label: u32,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
    pub kept: bool,
    /// Index of the prompt that claimed the cluster.
    pub prompt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub revision: u64,
    pub label: Rle,
    pub clusters: Vec<ClusterView>,
    pub prompts: Vec<Prompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub revision: u64,
    pub prompts: Vec<Prompt>,
    pub label: Rle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    pub image_id: String,
    pub revision: u64,
    pub label_path: PathBuf,
    pub prompts_path: PathBuf,
    pub prompts: usize,
}

fn label_response(s: &Session) -> LabelResponse {
    let clusters = match &s.last {
        Some(p) => p
            .candidates
            .clusters
            .iter()
            .map(|c| {
                let claim = p.outcome.kept.iter().find(|k| k.label == c.label);
                ClusterView {
                    label: c.label,
                    bbox: c.bbox,
                    centroid: c.centroid,
                    kept: claim.is_some(),
                    prompt: claim.and_then(|k| k.prompt),
                }
            })
            .collect(),
        None => Vec::new(),
    };
    LabelResponse {
        revision: s.revision,
        label: rle_encode(&s.label()),
        clusters,
        prompts: s.prompts.prompts().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Handlers

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_images(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let ids: Vec<&str> = st
        .manifest
        .iter()
        .flat_map(|m| m.images.iter().map(|e| e.image_id.as_str()))
        .collect();
    Json(json!({ "images": ids }))
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let (image_id, image) = match (req.png_base64, req.image_id) {
        (Some(b64), id) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.as_bytes())
                .map_err(|e| ApiError::bad_request(format!("png_base64: {e}")))?;
            let image = decode_image_png(&bytes).map_err(|e| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_image", e.to_string())
            })?;
            let id = id.unwrap_or_else(|| format!("upload-{}", uuid::Uuid::new_v4().simple()));
            (id, image)
        }
        (None, Some(id)) => {
            let manifest = st.manifest.as_ref().ok_or_else(|| {
                ApiError::not_found("no manifest loaded; upload an image instead")
            })?;
            let entry = manifest.entry(&id).ok_or_else(|| {
                ApiError::not_found(format!("image `{id}` is not in the manifest"))
            })?;
            let path = manifest.image_path(entry);
            let image = tokio::task::spawn_blocking(move || load_image(path))
                .await
                .map_err(join_error)?
                .map_err(|e| {
                    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
                })?;
            (id, image)
        }
        (None, None) => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "bad_request",
                "either image_id or png_base64 is required",
            ))
        }
    };
    validate_image_id(&image_id).map_err(ApiError::bad_request)?;
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let created = SessionCreated {
        session_id: session_id.clone(),
        image_id: image_id.clone(),
        width: image.width(),
        height: image.height(),
        revision: 0,
    };
    let session = Session {
        prompts: PromptSet::empty(image_id.clone()),
        image_id,
        image: Arc::new(image),
        revision: 0,
        last: None,
    };
    st.sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(session_id, Arc::new(Mutex::new(session)));
    log::info!(
        "session {} opened for `{}`",
        created.session_id,
        created.image_id
    );
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionView>> {
    let session = st.session(&id)?;
    let s = lock(&session);
    Ok(Json(SessionView {
        session_id: id,
        image_id: s.image_id.clone(),
        width: s.image.width(),
        height: s.image.height(),
        revision: s.revision,
        prompts: s.prompts.prompts().to_vec(),
        label: rle_encode(&s.label()),
    }))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image_png(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let session = st.session(&id)?;
    let image = lock(&session).image.clone();
    Ok(png(encode_image_png(&image)))
}

async fn label_png(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let session = st.session(&id)?;
    let label = lock(&session).label();
    Ok(png(encode_mask_png(&label)))
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

/// Runs the pipeline for `prompts` off the async runtime and commits the
/// result if the session is still at `base`.
async fn run_and_commit(
    st: Arc<AppState>,
    session: Arc<Mutex<Session>>,
    image: Arc<RasterImage>,
    prompts: PromptSet,
    base: u64,
) -> ApiResult<Json<LabelResponse>> {
    let worker = st.clone();
    let (prompts, result) = tokio::task::spawn_blocking(move || {
        let r = run_image(&image, &prompts, worker.backend.as_ref(), &worker.cfg);
        (prompts, r)
    })
    .await
    .map_err(join_error)?;
    let result = result?;
    let mut s = lock(&session);
    if s.revision != base {
        return Err(ApiError::conflict(s.revision));
    }
    s.prompts = prompts;
    s.revision += 1;
    s.last = Some(Arc::new(result));
    Ok(Json(label_response(&s)))
}

async fn add_prompt(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AddPrompt>,
) -> ApiResult<Json<LabelResponse>> {
    let session = st.session(&id)?;
    let (image, prompts, base) = {
        let s = lock(&session);
        if req.revision.is_some_and(|r| r != s.revision) {
            return Err(ApiError::conflict(s.revision));
        }
        let (w, h) = s.image.dims();
        let inside = |v: i64, n: usize| v >= 0 && (v as u64) < n as u64;
        if !inside(req.x, w) || !inside(req.y, h) {
            return Err(ForgeError::Coordinate {
                index: s.prompts.len(),
                x: req.x,
                y: req.y,
                width: w,
                height: h,
            }
            .into());
        }
        let mut prompts = s.prompts.clone();
        prompts.push(Prompt::new(req.x as u32, req.y as u32, req.kind))?;
        (s.image.clone(), prompts, s.revision)
    };
    run_and_commit(st, session, image, prompts, base).await
}

async fn undo_prompt(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<LabelResponse>> {
    let session = st.session(&id)?;
    let (image, prompts, base) = {
        let s = lock(&session);
        let mut prompts = s.prompts.clone();
        if prompts.pop().is_none() {
            return Err(ApiError::bad_request("no prompt to undo"));
        }
        (s.image.clone(), prompts, s.revision)
    };
    run_and_commit(st, session, image, prompts, base).await
}

async fn finalize(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Finalized>> {
    let session = st.session(&id)?;
    let (image_id, label, prompts, revision) = {
        let s = lock(&session);
        (s.image_id.clone(), s.label(), s.prompts.clone(), s.revision)
    };
    let worker = st.clone();
    let done = tokio::task::spawn_blocking(move || -> forge_core::Result<Finalized> {
        let label_dir = worker.out_dir.join(LABEL_DIR);
        fs::create_dir_all(&label_dir).map_err(|e| ForgeError::io(&label_dir, e))?;
        let label_path = label_dir.join(format!("{image_id}.png"));
        save_mask(&label, &label_path)?;
        let prompts_path = worker.out_dir.join(PROMPTS_FILE);
        let _guard = worker.finalize.lock().unwrap_or_else(|e| e.into_inner());
        // Re-finalizing an image replaces its earlier rows.
        let mut rows = if prompts_path.exists() {
            read_prompt_rows(&prompts_path)?
        } else {
            Vec::new()
        };
        rows.retain(|r| r.image_id != image_id);
        rows.extend(prompt_rows(&prompts));
        write_prompt_rows(&prompts_path, &rows)?;
        Ok(Finalized {
            image_id,
            revision,
            label_path,
            prompts_path,
            prompts: prompts.len(),
        })
    })
    .await
    .map_err(join_error)?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    log::info!(
        "finalized `{}` at revision {}",
        done.image_id,
        done.revision
    );
    Ok(Json(done))
}
