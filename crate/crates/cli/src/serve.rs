//! HTTP search API over a frozen model and gallery, plus the static UI.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prkt_core::retrieval::RerankParams;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::ServeArgs;
use crate::engine::Engine;
use crate::{CliError, Result};

const INDEX_HTML: &str = include_str!("../static/index.html");

/// Immutable after startup; shared by every request.
#[derive(Debug)]
pub struct ServeState {
    pub engine: Engine,
    pub image_root: PathBuf,
    pub default_k: usize,
    pub rerank: RerankParams,
    /// Whether requests that do not say otherwise are re-ranked.
    pub rerank_by_default: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub gallery_ref: Option<String>,
    pub k: Option<usize>,
    pub rerank: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiHit {
    pub rank: usize,
    pub patent_id: String,
    pub image_ref: String,
    pub image_url: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<ApiHit>,
    pub rerank_used: bool,
    pub k: usize,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Io { .. } => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            other => bad_request(other.to_string()),
        }
    }
}

/// Percent-encodes everything outside a conservative path-safe set.
fn encode_path(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"/._-~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn image_url(image_ref: &str) -> String {
    format!("/api/images/{}", encode_path(image_ref))
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/", get(|| async { Html(INDEX_HTML) }))
        .route("/index.html", get(|| async { Html(INDEX_HTML) }))
        .route("/api/health", get(health))
        .route("/api/gallery", get(gallery))
        .route("/api/search", post(search))
        .route("/api/images/{*image_ref}", get(image))
        .with_state(state)
}

async fn health(State(s): State<Arc<ServeState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "gallery_size": s.engine.store.len() }))
}

async fn gallery(State(s): State<Arc<ServeState>>) -> Json<serde_json::Value> {
    let store = &s.engine.store;
    let items: Vec<_> = store
        .image_refs()
        .iter()
        .zip(store.labels())
        .map(|(r, l)| json!({ "image_ref": r, "patent_id": l, "image_url": image_url(r) }))
        .collect();
    Json(json!({
        "items": items,
        "default_k": s.default_k,
        "rerank": s.rerank,
        "rerank_by_default": s.rerank_by_default,
    }))
}

/// Query source after parsing either request body shape.
enum Query {
    GalleryRef(String),
    Upload(Vec<u8>),
}

async fn parse_multipart(mut mp: Multipart) -> Result<(Query, SearchRequest), ApiError> {
    let mut upload = None;
    let mut req = SearchRequest::default();
    while let Some(field) = mp.next_field().await.map_err(|e| bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| bad_request(e.to_string()))?;
        let text = || String::from_utf8_lossy(&bytes).trim().to_string();
        match name.as_str() {
            "image" => upload = Some(bytes.to_vec()),
            "gallery_ref" => req.gallery_ref = Some(text()),
            "k" => req.k = Some(text().parse().map_err(|_| bad_request("k must be a positive integer"))?),
            "rerank" => req.rerank = Some(matches!(text().as_str(), "true" | "1" | "on")),
            other => return Err(bad_request(format!("unexpected form field `{other}`"))),
        }
    }
    let query = match (upload, req.gallery_ref.take()) {
        (Some(bytes), None) => Query::Upload(bytes),
        (None, Some(r)) => Query::GalleryRef(r),
        _ => return Err(bad_request("send exactly one of an `image` file or a `gallery_ref`")),
    };
    Ok((query, req))
}

async fn search(State(s): State<Arc<ServeState>>, req: Request) -> Result<Json<SearchResponse>, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (query, params) = if is_multipart {
        let mp = Multipart::from_request(req, &s).await.map_err(|e| bad_request(e.body_text()))?;
        parse_multipart(mp).await?
    } else {
        let Json(mut body) = Json::<SearchRequest>::from_request(req, &s)
            .await
            .map_err(|e| bad_request(e.body_text()))?;
        let r = body.gallery_ref.take().ok_or_else(|| bad_request("missing `gallery_ref`"))?;
        (Query::GalleryRef(r), body)
    };
    let k = params.k.unwrap_or(s.default_k);
    let rerank_used = params.rerank.unwrap_or(s.rerank_by_default);
    let state = s.clone();
    let ranked = tokio::task::spawn_blocking(move || {
        let engine = &state.engine;
        let vector = match query {
            Query::GalleryRef(r) => {
                let row = engine
                    .store
                    .find_ref(&r)
                    .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no gallery image `{r}`")))?;
                engine.store.row(row).to_vec()
            }
            Query::Upload(bytes) => engine.embed_bytes(&bytes)?,
        };
        let rerank = rerank_used.then_some(&state.rerank);
        engine.rank(&vector, k, rerank).map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let hits = ranked
        .hits
        .into_iter()
        .enumerate()
        .map(|(i, h)| ApiHit {
            rank: i + 1,
            image_url: image_url(&h.image_path),
            image_ref: h.image_path,
            patent_id: h.patent_id,
            score: h.score,
        })
        .collect();
    Ok(Json(SearchResponse {
        hits,
        rerank_used,
        k: ranked.k,
    }))
}

/// Only files named by the gallery are served, so arbitrary paths are unreachable.
async fn image(State(s): State<Arc<ServeState>>, Path(image_ref): Path<String>) -> Result<Response, ApiError> {
    if s.engine.store.find_ref(&image_ref).is_none() {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no gallery image `{image_ref}`")));
    }
    let path = s.image_root.join(&image_ref);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let mime = if image_ref.ends_with(".pgm") { "image/x-portable-graymap" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn state_from_args(a: &ServeArgs) -> Result<ServeState> {
    let engine = Engine::load(&a.checkpoint, &a.embeddings)?;
    let rerank = a.rerank.params();
    rerank.validate(engine.store.len()).or_else(|e| {
        if a.rerank.rerank {
            Err(e)
        } else {
            log::warn!("re-ranking unavailable for this gallery: {e}");
            Ok(())
        }
    })?;
    Ok(ServeState {
        engine,
        image_root: a.image_root.clone(),
        default_k: a.k,
        rerank,
        rerank_by_default: a.rerank.rerank,
    })
}

pub fn run(a: &ServeArgs) -> Result<()> {
    let state = Arc::new(state_from_args(a)?);
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::io(format!("cannot listen on {addr}"), e))?;
        let local = listener.local_addr().map_err(|e| CliError::io("listener", e))?;
        log::info!("gallery of {} images", state.engine.store.len());
        println!("serving on http://{local}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::io("server", e))
    })
}
