//! JSON-over-HTTP service over an immutable model and index snapshot.
//!
//! Every response body carries the schema version in a top-level `v` field.
//! Errors have the shape `{"v": 1, "error": {"code": ..., "message": ...}}`.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use capsule_core::data::{Catalog, Item};
use capsule_core::index::{complete_outfit, EmbeddingIndex, QueryStatus};
use capsule_core::model::{OutfitModel, TargetSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_VERSION: u32 = 1;
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
pub const DEFAULT_K: usize = 10;

/// Everything a request reads. Never mutated after construction.
pub struct Snapshot {
    retrieval: OutfitModel,
    compatibility: Option<OutfitModel>,
    index: EmbeddingIndex,
    catalog: Catalog,
    fingerprint: String,
}

impl Snapshot {
    /// Verifies that the index was built by `retrieval` and that every
    /// indexed item has catalog metadata.
    pub fn new(
        retrieval: OutfitModel,
        compatibility: Option<OutfitModel>,
        index: EmbeddingIndex,
        catalog: Catalog,
    ) -> capsule_core::Result<Self> {
        use capsule_core::Error;
        if !retrieval.heads().cir {
            return Err(Error::Config("retrieval checkpoint has no retrieval head".into()));
        }
        if compatibility.as_ref().is_some_and(|m| !m.heads().cp) {
            return Err(Error::Config(
                "compatibility checkpoint has no compatibility head".into(),
            ));
        }
        let fingerprint = retrieval.fingerprint();
        index.check_fingerprint(&fingerprint)?;
        if let Some(e) = index.entries().iter().find(|e| catalog.get(&e.item_id).is_none()) {
            return Err(Error::Index(format!(
                "indexed item {} is missing from the catalog",
                e.item_id
            )));
        }
        Ok(Self {
            retrieval,
            compatibility,
            index,
            catalog,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

/// Holds the current snapshot. Replacing it is a single pointer swap;
/// requests already running keep the snapshot they started with.
#[derive(Default)]
pub struct ServiceState {
    current: RwLock<Option<Arc<Snapshot>>>,
}

impl ServiceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(snapshot: Snapshot) -> Self {
        let state = Self::new();
        state.install(snapshot);
        state
    }

    pub fn install(&self, snapshot: Snapshot) {
        *self.current.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.read().expect("snapshot lock").clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_ready() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_ready",
            "model and index are still loading",
        )
    }
}

impl From<capsule_core::Error> for ApiError {
    fn from(e: capsule_core::Error) -> Self {
        match e {
            capsule_core::Error::Input(m) => Self::bad_request(m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "v": API_VERSION,
            "error": {"code": self.code, "message": self.message},
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/items", get(items))
        .route("/compatibility", post(compatibility))
        .route("/complete", post(complete))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Response {
    match state.snapshot() {
        Some(s) => Json(json!({
            "v": API_VERSION,
            "status": "ready",
            "fingerprint": s.fingerprint,
            "items": s.index.len(),
            "compatibility": s.compatibility.is_some(),
        }))
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"v": API_VERSION, "status": "not_ready"})),
        )
            .into_response(),
    }
}

#[derive(Serialize)]
struct ItemSummary<'a> {
    item_id: &'a str,
    description: &'a str,
    fine_category: &'a str,
    high_category: &'a str,
}

fn parse_usize(params: &HashMap<String, String>, key: &str, default: usize) -> Result<usize, ApiError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::bad_request(format!("{key} must be a non-negative integer, got {v:?}"))),
    }
}

/// Catalog metadata, filtered by fine or high category, 1-based pages.
async fn items(State(state): State<Arc<ServiceState>>, Query(params): Query<HashMap<String, String>>) -> ApiResult {
    let snap = state.snapshot().ok_or_else(ApiError::not_ready)?;
    let page = parse_usize(&params, "page", 1)?;
    let page_size = parse_usize(&params, "page_size", DEFAULT_PAGE_SIZE)?;
    if page == 0 {
        return Err(ApiError::bad_request("page starts at 1"));
    }
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page_size must lie in 1..={MAX_PAGE_SIZE}"
        )));
    }
    let category = params.get("category").filter(|c| !c.is_empty());
    let matching: Vec<&Item> = snap
        .catalog
        .items()
        .iter()
        .filter(|it| category.is_none_or(|c| it.fine_category == *c || it.high_category == *c))
        .collect();
    let page_items: Vec<ItemSummary> = matching
        .iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|it| ItemSummary {
            item_id: &it.item_id,
            description: &it.description,
            fine_category: &it.fine_category,
            high_category: &it.high_category,
        })
        .collect();
    Ok(Json(json!({
        "v": API_VERSION,
        "page": page,
        "page_size": page_size,
        "total": matching.len(),
        "items": page_items,
    })))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Resolves ids in request order; duplicates and unknown ids are rejected.
fn resolve<'a>(catalog: &'a Catalog, ids: &[String]) -> Result<Vec<&'a Item>, ApiError> {
    let mut seen = BTreeSet::new();
    ids.iter()
        .map(|id| {
            if !seen.insert(id.as_str()) {
                return Err(ApiError::bad_request(format!("item id {id:?} is listed twice")));
            }
            catalog
                .get(id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_item", format!("unknown item id {id:?}")))
        })
        .collect()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Deserialize)]
struct CompatibilityRequest {
    item_ids: Vec<String>,
}

async fn compatibility(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult {
    let snap = state.snapshot().ok_or_else(ApiError::not_ready)?;
    let req: CompatibilityRequest = parse_body(&body)?;
    blocking(move || {
        let start = Instant::now();
        let model = snap.compatibility.as_ref().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "unavailable",
                "no compatibility checkpoint is loaded",
            )
        })?;
        if req.item_ids.len() < 2 {
            return Err(ApiError::bad_request(format!(
                "compatibility needs at least 2 items, got {}",
                req.item_ids.len()
            )));
        }
        let items = resolve(&snap.catalog, &req.item_ids)?;
        let score = model.score(&items)?;
        Ok(Json(json!({
            "v": API_VERSION,
            "score": score,
            "latency_ms": start.elapsed().as_secs_f64() * 1e3,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct CompleteRequest {
    item_ids: Vec<String>,
    target: TargetSpec,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Serialize)]
struct Candidate {
    item_id: String,
    distance: f64,
    category: String,
}

async fn complete(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult {
    let snap = state.snapshot().ok_or_else(ApiError::not_ready)?;
    let req: CompleteRequest = parse_body(&body)?;
    blocking(move || {
        if req.item_ids.is_empty() {
            return Err(ApiError::bad_request("item_ids must name at least 1 item"));
        }
        if req.k == 0 {
            return Err(ApiError::bad_request("k must be at least 1"));
        }
        req.target.validate()?;
        let items = resolve(&snap.catalog, &req.item_ids)?;
        let result = complete_outfit(&snap.index, &snap.retrieval, &items, &req.target, req.k)?;
        let candidates: Vec<Candidate> = result
            .neighbors
            .into_iter()
            .map(|n| Candidate {
                item_id: n.item_id,
                distance: n.distance,
                category: n.fine_category,
            })
            .collect();
        let status = match result.status {
            QueryStatus::Ok => "ok",
            QueryStatus::EmptyPool => "empty_pool",
        };
        Ok(Json(json!({
            "v": API_VERSION,
            "status": status,
            "candidates": candidates,
        })))
    })
    .await
}
