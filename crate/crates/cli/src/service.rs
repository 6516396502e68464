//! HTTP service over an immutable session: SAG JSON, what-if confidences,
//! masked renders and nearest-node lookups.
//!
//! Every error response is `{"error": {"code": ..., "message": ...}}`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use sfrg_core::model::{blur_baseline, file::decode_cnn, BaselineConfig, Scorer};
use sfrg_core::perturbation::{apply_mask, subset_to_mask, PatchGrid, PatchSubset};
use sfrg_core::sag::{confidence_of, Sag};
use sfrg_core::Image;
use tower_http::cors::CorsLayer;

use crate::cli::ServeArgs;
use crate::imageio::{decode_png, encode_png};
use crate::manifest::sha256_hex;
use crate::run::{file_stem, parse_patch_list, png_files, Invocation, Run};

/// Grid used by what-if and render queries that do not name one.
pub const DEFAULT_GRID: usize = 7;

/// Everything the service answers from; never mutated after construction.
pub struct Session {
    pub session_id: String,
    pub model_hash: String,
    scorer: Box<dyn Scorer>,
    images: BTreeMap<String, Image>,
    sags: BTreeMap<String, Sag>,
    /// Blurred baseline per (image, class), or why none passed the confidence check.
    baselines: HashMap<(String, usize), std::result::Result<Image, String>>,
}

impl Session {
    pub fn new(
        scorer: Box<dyn Scorer>,
        model_hash: String,
        images: Vec<(String, Image)>,
        sags: Vec<(String, Sag)>,
        baseline: BaselineConfig,
    ) -> Result<Self> {
        let shape = scorer.input_shape();
        let mut image_map = BTreeMap::new();
        for (id, image) in images {
            ensure!(image.shape() == shape, "image {id} is {}, the model expects {shape}", image.shape());
            ensure!(image_map.insert(id.clone(), image).is_none(), "duplicate image id {id}");
        }
        let mut sag_map = BTreeMap::new();
        for (id, sag) in sags {
            ensure!(sag_map.insert(id.clone(), sag).is_none(), "duplicate SAG id {id}");
        }
        let mut baselines = HashMap::new();
        for (id, image) in &image_map {
            for class in 0..scorer.class_count() {
                let b = blur_baseline(scorer.as_ref(), image, class, baseline)
                    .map(|b| b.image)
                    .map_err(|e| e.to_string());
                baselines.insert((id.clone(), class), b);
            }
        }
        let nonce = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let session_id = sha256_hex(format!("{model_hash}:{}:{nonce}", std::process::id()).as_bytes())[..16].to_string();
        Ok(Session { session_id, model_hash, scorer, images: image_map, sags: sag_map, baselines })
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    pub fn sag_ids(&self) -> impl Iterator<Item = &String> {
        self.sags.keys()
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
        ApiError { status, code, message: message.into() }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Shared = State<Arc<Session>>;

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", get(list_images))
        .route("/sags", get(list_sags))
        .route("/sags/{id}", get(get_sag))
        .route("/whatif", post(whatif))
        .route("/render", get(render))
        .route("/nearest", get(nearest))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed here")
        })
        .layer(CorsLayer::permissive())
        .with_state(session)
}

async fn health(State(s): Shared) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "model_hash": s.model_hash,
        "session_id": s.session_id,
        "images": s.images.len(),
        "sags": s.sags.len(),
    }))
}

async fn list_images(State(s): Shared) -> Json<Vec<String>> {
    Json(s.images.keys().cloned().collect())
}

async fn list_sags(State(s): Shared) -> Json<Vec<String>> {
    Json(s.sags.keys().cloned().collect())
}

async fn get_sag(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Sag>> {
    s.sags
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_sag", format!("no SAG {id:?}")))
}

type Params = HashMap<String, String>;

fn query(q: std::result::Result<Query<Params>, QueryRejection>) -> ApiResult<Params> {
    q.map(|Query(p)| p).map_err(|e| ApiError::bad("invalid_query", e.body_text()))
}

fn required<'a>(p: &'a Params, key: &str) -> ApiResult<&'a str> {
    p.get(key)
        .map(String::as_str)
        .ok_or_else(|| ApiError::bad("missing_parameter", format!("missing query parameter {key:?}")))
}

impl Session {
    fn image(&self, id: &str) -> ApiResult<&Image> {
        self.images
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no image {id:?}")))
    }

    fn check_class(&self, class: Option<i64>) -> ApiResult<usize> {
        let n = self.scorer.class_count();
        match class {
            Some(c) if c >= 0 && (c as usize) < n => Ok(c as usize),
            _ => Err(ApiError::bad("invalid_class", format!("class_index must be an integer in [0, {n})"))),
        }
    }

    fn baseline(&self, image_id: &str, class: usize) -> ApiResult<&Image> {
        match self.baselines.get(&(image_id.to_string(), class)) {
            Some(Ok(b)) => Ok(b),
            Some(Err(e)) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "baseline_failure", e.clone())),
            None => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no image {image_id:?}"))),
        }
    }
}

fn grid_for(image: &Image, rows: usize, cols: usize) -> ApiResult<PatchGrid> {
    PatchGrid::for_image(rows, cols, image).map_err(|e| ApiError::bad("invalid_grid", e.to_string()))
}

fn subset(members: Vec<usize>, patch_count: usize) -> ApiResult<PatchSubset> {
    PatchSubset::new(patch_count, members).map_err(|e| ApiError::bad("invalid_patches", e.to_string()))
}

fn patches_from_query(p: &Params) -> ApiResult<Vec<usize>> {
    parse_patch_list(required(p, "patches")?).map_err(|m| ApiError::bad("invalid_patches", m))
}

fn usize_param(p: &Params, key: &str, default: usize, code: &'static str) -> ApiResult<usize> {
    match p.get(key) {
        None => Ok(default),
        Some(v) => v.trim().parse().map_err(|_| ApiError::bad(code, format!("{key} must be a non-negative integer"))),
    }
}

#[derive(Serialize)]
struct WhatIf {
    confidence: f64,
    full_confidence: f64,
    ratio: f64,
}

async fn whatif(State(s): Shared, body: Bytes) -> ApiResult<Json<WhatIf>> {
    let v: Value = serde_json::from_slice(&body).map_err(|e| ApiError::bad("malformed_json", e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| ApiError::bad("malformed_json", "body must be a JSON object"))?;
    let image_id = obj
        .get("image_id")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::bad("invalid_request", "image_id must be a string"))?;
    let image = s.image(image_id)?;
    let class = s.check_class(obj.get("class_index").and_then(Value::as_i64))?;
    let members = obj
        .get("patches")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::bad("invalid_patches", "patches must be an array of integers"))?
        .iter()
        .map(|p| {
            p.as_u64()
                .map(|p| p as usize)
                .ok_or_else(|| ApiError::bad("invalid_patches", format!("invalid patch index {p}")))
        })
        .collect::<ApiResult<Vec<usize>>>()?;
    let (rows, cols) = match obj.get("grid") {
        None | Some(Value::Null) => (DEFAULT_GRID, DEFAULT_GRID),
        Some(g) => {
            let dim = |k: &str| g.get(k).and_then(Value::as_u64).map(|v| v as usize);
            match (dim("rows"), dim("cols")) {
                (Some(r), Some(c)) => (r, c),
                _ => return Err(ApiError::bad("invalid_grid", "grid must be {rows, cols}")),
            }
        }
    };
    let grid = grid_for(image, rows, cols)?;
    let subset = subset(members, grid.patch_count())?;
    let baseline = s.baseline(image_id, class)?;
    let confidence = confidence_of(s.scorer.as_ref(), image, baseline, grid, &subset, class)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let full_confidence = s.scorer.probabilities(image)[class];
    Ok(Json(WhatIf { confidence, full_confidence, ratio: confidence / full_confidence }))
}

async fn render(State(s): Shared, q: std::result::Result<Query<Params>, QueryRejection>) -> ApiResult<Response> {
    let p = query(q)?;
    let image_id = required(&p, "image_id")?;
    let image = s.image(image_id)?;
    let class = match p.get("class_index") {
        None => sfrg_core::model::POSITIVE.min(s.scorer.class_count() - 1),
        Some(v) => s.check_class(v.trim().parse().ok())?,
    };
    let g = usize_param(&p, "grid", DEFAULT_GRID, "invalid_grid")?;
    let grid = grid_for(image, g, g)?;
    let subset = subset(patches_from_query(&p)?, grid.patch_count())?;
    let baseline = s.baseline(image_id, class)?;
    let masked = subset_to_mask(&subset, &grid)
        .and_then(|m| apply_mask(image, baseline, &m))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let png = encode_png(&masked).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Serialize)]
struct NearestNode {
    id: usize,
    distance: usize,
}

async fn nearest(State(s): Shared, q: std::result::Result<Query<Params>, QueryRejection>) -> ApiResult<Json<Value>> {
    let p = query(q)?;
    let sag_id = required(&p, "sag_id")?;
    let sag = s
        .sags
        .get(sag_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_sag", format!("no SAG {sag_id:?}")))?;
    let n = sag.grid.rows * sag.grid.cols;
    let query_subset = subset(patches_from_query(&p)?, n)?;
    let mut nodes: Vec<NearestNode> = sag
        .nodes
        .iter()
        .map(|node| {
            let other = PatchSubset::new(n, node.patches.clone()).expect("validated SAG");
            NearestNode { id: node.id, distance: query_subset.symmetric_difference(&other) }
        })
        .collect();
    nodes.sort_by_key(|n| (n.distance, n.id));
    let node_ids: Vec<usize> = nodes.iter().map(|n| n.id).collect();
    Ok(Json(json!({ "sag_id": sag_id, "query": query_subset.members(), "node_ids": node_ids, "nodes": nodes })))
}

/// SAGs from `*.json` files and from subdirectories holding a `sag.json`;
/// ids are file stems and directory names respectively.
pub fn load_sags(dir: &Path, run: Option<&mut Run>) -> Result<Vec<(String, Sag)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut found = Vec::new();
    for path in entries {
        let (id, file) = if path.is_dir() {
            let f = path.join("sag.json");
            if !f.is_file() {
                continue;
            }
            (path.file_name().unwrap_or_default().to_string_lossy().into_owned(), f)
        } else if path.extension().is_some_and(|e| e == "json") {
            (file_stem(&path), path.clone())
        } else {
            continue;
        };
        found.push((id, file));
    }
    let mut run = run;
    let mut sags = Vec::new();
    for (id, file) in found {
        let bytes = match run.as_deref_mut() {
            Some(r) => r.read_input(&file)?,
            None => std::fs::read(&file)?,
        };
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", file.display()))?;
        let sag = Sag::from_json(&text).with_context(|| format!("loading SAG {}", file.display()))?;
        sags.push((id, sag));
    }
    Ok(sags)
}

pub fn serve_cmd(a: &ServeArgs, inv: &Invocation) -> Result<()> {
    let mut run = match &a.out {
        Some(out) => Some(Run::start(inv, "serve", out)?),
        None => None,
    };
    let model_bytes = match run.as_mut() {
        Some(r) => r.read_input(&a.model)?,
        None => std::fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?,
    };
    let model = decode_cnn(&model_bytes).with_context(|| format!("loading model {}", a.model.display()))?;
    let mut images = Vec::new();
    for path in png_files(&a.images)? {
        let bytes = match run.as_mut() {
            Some(r) => r.read_input(&path)?,
            None => std::fs::read(&path)?,
        };
        images.push((file_stem(&path), decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))?));
    }
    let sags = match &a.sags {
        Some(dir) => load_sags(dir, run.as_mut())?,
        None => Vec::new(),
    };
    let session = Session::new(Box::new(model), sha256_hex(&model_bytes), images, sags, a.baseline.config())?;
    if let Some(mut r) = run {
        r.config(&json!({ "host": a.host, "port": a.port, "baseline": a.baseline.config() }))?;
        r.out.write_json(
            "session.json",
            &json!({
                "model_hash": session.model_hash,
                "images": session.image_ids().collect::<Vec<_>>(),
                "sags": session.sag_ids().collect::<Vec<_>>(),
            }),
        )?;
        r.note(format!("session {}", session.session_id));
        r.finish()?;
    }
    let app = router(Arc::new(session));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
