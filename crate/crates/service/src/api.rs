//! JSON endpoints over one loaded checkpoint and dataset.
//!
//! Handlers never mutate shared state: every edit builds its own override and
//! forward pass, so concurrent requests cannot observe each other's edits. The
//! evaluation report is computed once on first request unless preloaded.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tab_core::intervene::{apply_edit, AttentionEdit};
use tab_core::metrics::{evaluate, EvalReport};
use tab_core::model::{checkpoint_hash, BottleneckKind, RowOverride, SideState, TabState};
use tab_core::synthdata::{ChangeKind, Image, ManifestRecord, ScenePair, Split};
use tab_core::{Model32, TabError};
use tower_http::cors::CorsLayer;

pub struct AppState {
    pub model: Model32,
    pub hash: String,
    pub pairs: Vec<ScenePair>,
    index: HashMap<u32, usize>,
    report: OnceLock<EvalReport>,
}

impl AppState {
    pub fn new(model: Model32, pairs: Vec<ScenePair>, report: Option<EvalReport>) -> tab_core::Result<Self> {
        let hash = checkpoint_hash(&model)?;
        let index = pairs.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let cell = OnceLock::new();
        if let Some(r) = report {
            let _ = cell.set(r);
        }
        Ok(AppState { model, hash, pairs, index, report: cell })
    }

    fn pair(&self, id: u32) -> Result<&ScenePair, ApiError> {
        self.index.get(&id).map(|&i| &self.pairs[i]).ok_or(ApiError::NotFound(id))
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(u32),
    Invalid { field: String, msg: String },
    Internal(String),
}

impl From<TabError> for ApiError {
    fn from(e: TabError) -> Self {
        match e {
            TabError::Edit { field, msg } => ApiError::Invalid { field, msg },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, field) = match self {
            ApiError::NotFound(id) => (StatusCode::NOT_FOUND, format!("no sample with id {id}"), None),
            ApiError::Invalid { field, msg } => (StatusCode::UNPROCESSABLE_ENTITY, msg, Some(field)),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, msg, None),
        };
        (status, Json(ErrorBody { error, field })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<AppState>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideAttention {
    pub a_cls: Vec<f64>,
    pub gate: f64,
    /// Patch entries of `a_cls` as `p` rows of `p`.
    pub heatmap: Vec<Vec<f64>>,
}

impl SideAttention {
    fn of(side: &SideState, grid: usize) -> Self {
        SideAttention {
            a_cls: side.a_cls.clone(),
            gate: side.gate,
            heatmap: side.patch_attention().chunks(grid).map(<[f64]>::to_vec).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub id: u32,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub sides: [SideAttention; 2],
    pub model: BottleneckKind,
    pub checkpoint: String,
    /// Unedited caption; present on edit responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_caption: Option<String>,
}

impl InferResponse {
    fn new(st: &AppState, id: u32, caption: String, tokens: Vec<usize>, state: &TabState) -> Self {
        let grid = st.model.config.patch_grid();
        InferResponse {
            id,
            caption,
            tokens,
            sides: [SideAttention::of(&state.sides[0], grid), SideAttention::of(&state.sides[1], grid)],
            model: st.model.kind(),
            checkpoint: st.hash.clone(),
            base_caption: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub id: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub id: u32,
    pub edit: AttentionEdit,
}

#[derive(Debug, Deserialize)]
pub struct Page {
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: u32,
    pub split: Split,
    pub change: Option<ChangeKind>,
    pub captions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplePage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<SampleSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, interleaved channels, values in `[0, 1]`.
    pub data: Vec<f32>,
}

impl From<&Image> for RawImage {
    fn from(img: &Image) -> Self {
        RawImage { height: img.height, width: img.width, channels: img.channels, data: img.data.clone() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleDetail {
    pub manifest: ManifestRecord,
    pub image_a: RawImage,
    pub image_b: RawImage,
}

/// Runs CPU-bound model work off the async executor.
async fn blocking<T: Send + 'static>(
    st: &Shared,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let st = Arc::clone(st);
    tokio::task::spawn_blocking(move || f(&st)).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn health(State(st): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model": st.model.kind(), "checkpoint": st.hash, "samples": st.pairs.len() }))
}

async fn samples(State(st): State<Shared>, Query(page): Query<Page>) -> Json<SamplePage> {
    let items = st
        .pairs
        .iter()
        .skip(page.offset)
        .take(page.limit)
        .map(|p| SampleSummary {
            id: p.id,
            split: p.split,
            change: p.change.is_change().then(|| p.change.kind()),
            captions: p.captions.clone(),
        })
        .collect();
    Json(SamplePage { total: st.pairs.len(), offset: page.offset, items })
}

async fn sample(State(st): State<Shared>, Path(id): Path<u32>) -> ApiResult<SampleDetail> {
    let p = st.pair(id)?;
    Ok(Json(SampleDetail {
        manifest: ManifestRecord::from_pair(p),
        image_a: (&p.image_a).into(),
        image_b: (&p.image_b).into(),
    }))
}

async fn infer(State(st): State<Shared>, Json(req): Json<InferRequest>) -> ApiResult<InferResponse> {
    st.pair(req.id)?;
    let resp = blocking(&st, move |st| {
        let p = st.pair(req.id)?;
        let out = st.model.forward_pair(&p.image_a, &p.image_b, &RowOverride::none())?;
        Ok(InferResponse::new(st, req.id, out.caption, out.tokens, &out.state))
    })
    .await?;
    Ok(Json(resp))
}

async fn edit(State(st): State<Shared>, Json(req): Json<EditRequest>) -> ApiResult<InferResponse> {
    st.pair(req.id)?;
    let resp = blocking(&st, move |st| {
        let p = st.pair(req.id)?;
        let out = apply_edit(&st.model, p, &req.edit)?;
        let mut resp = InferResponse::new(st, req.id, out.caption, out.tokens, &out.after);
        resp.base_caption = Some(out.base_caption);
        Ok(resp)
    })
    .await?;
    Ok(Json(resp))
}

async fn report(State(st): State<Shared>) -> ApiResult<EvalReport> {
    let r = blocking(&st, |st| {
        if let Some(r) = st.report.get() {
            return Ok(r.clone());
        }
        let r = evaluate(&st.model, &st.pairs)?;
        Ok(st.report.get_or_init(|| r).clone())
    })
    .await?;
    Ok(Json(r))
}

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}", get(sample))
        .route("/api/infer", post(infer))
        .route("/api/edit", post(edit))
        .route("/api/report", get(report))
        .layer(cors)
        .with_state(Arc::new(state))
}
