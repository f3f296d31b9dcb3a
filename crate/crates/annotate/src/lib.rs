//! HTTP service exposing an image corpus and its VOC annotations to a
//! browser annotator.
//!
//! Image ids are paths relative to the dataset root with `/` separators;
//! clients percent-encode them into a single path segment.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use signdet::dataset::{parse_voc_xml, write_voc_xml, Annotation, LabelMap, PixelBox, VocObject};
use signdet::fsutil::write_atomic;
use signdet::image::{format_for_extension, probe_dimensions};
use signdet::Error;

pub const VERSION_HEADER: &str = "x-annotation-version";
pub const REPLACED_HEADER: &str = "x-replaced-version";

pub struct AppState {
    root: PathBuf,
    labels: LabelMap,
    write_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(root: &Path, labels: LabelMap) -> std::io::Result<Self> {
        Ok(AppState {
            root: root.canonicalize()?,
            labels,
            write_locks: Mutex::new(HashMap::new()),
        })
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.write_locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Resolves an id to an existing image file inside the root.
    fn resolve(&self, id: &str) -> Result<PathBuf, ApiError> {
        let rel = Path::new(id);
        let plain = !id.is_empty()
            && !id.contains('\\')
            && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !plain || image_format(rel).is_none() {
            return Err(ApiError::not_found(id));
        }
        let full = self.root.join(rel);
        // canonicalize also follows symlinks, so a link pointing outside is caught here
        match full.canonicalize() {
            Ok(p) if p.starts_with(&self.root) && p.is_file() => Ok(p),
            _ => Err(ApiError::not_found(id)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub label: String,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxJson {
    pub label: String,
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationJson {
    pub width: i64,
    pub height: i64,
    pub objects: Vec<BoxJson>,
}

impl From<&Annotation> for AnnotationJson {
    fn from(a: &Annotation) -> Self {
        AnnotationJson {
            width: a.width as i64,
            height: a.height as i64,
            objects: a
                .objects
                .iter()
                .map(|o| BoxJson {
                    label: o.name.clone(),
                    xmin: o.bndbox.xmin as i64,
                    ymin: o.bndbox.ymin as i64,
                    xmax: o.bndbox.xmax as i64,
                    ymax: o.bndbox.ymax as i64,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("no image with id {id:?}"),
            fields: Vec::new(),
        }
    }

    fn invalid(message: impl Into<String>, fields: Vec<FieldError>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            fields,
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
            fields: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "fields": self.fields });
        (self.status, Json(body)).into_response()
    }
}

fn image_format(path: &Path) -> Option<&'static str> {
    path.extension().and_then(|e| e.to_str()).and_then(format_for_extension)
}

fn content_type(format: &str) -> &'static str {
    match format {
        "ppm" => "image/x-portable-pixmap",
        "jpeg" => "image/jpeg",
        "png" => "image/png",
        _ => "application/octet-stream",
    }
}

fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension("xml")
}

fn version_of(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn with_version(mut resp: Response, version: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(version) {
        resp.headers_mut().insert(VERSION_HEADER, v.clone());
        if let Ok(etag) = HeaderValue::from_str(&format!("\"{version}\"")) {
            resp.headers_mut().insert(header::ETAG, etag);
        }
    }
    resp
}

fn scan(root: &Path, dir: &Path, out: &mut Vec<ImageEntry>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let ft = entry.file_type()?;
        if ft.is_dir() {
            scan(root, &path, out)?;
            continue;
        }
        let Some(format) = image_format(&path) else { continue };
        let Ok(rel) = path.strip_prefix(root) else { continue };
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let label = rel
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dims = std::fs::read(&path).ok().and_then(|b| probe_dimensions(format, &b).ok());
        out.push(ImageEntry {
            id,
            label,
            width: dims.map(|d| d.0),
            height: dims.map(|d| d.1),
            annotated: annotation_path(&path).is_file(),
        });
    }
    Ok(())
}

/// Lists every image under `root`, sorted by id.
pub fn list_images(root: &Path) -> std::io::Result<Vec<ImageEntry>> {
    let mut out = Vec::new();
    scan(root, root, &mut out)?;
    Ok(out)
}

async fn get_labelmap(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(state.labels.entries()).expect("entries serialize"))
}

async fn get_images(State(state): State<Arc<AppState>>) -> Result<Json<Vec<ImageEntry>>, ApiError> {
    let root = state.root.clone();
    let list = tokio::task::spawn_blocking(move || list_images(&root))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(Json(list))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = state.resolve(&id)?;
    let format = image_format(&path).unwrap_or("");
    let bytes = tokio::fs::read(&path).await.map_err(|_| ApiError::not_found(&id))?;
    Ok(([(header::CONTENT_TYPE, content_type(format))], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct AnnotationQuery {
    format: Option<String>,
}

async fn get_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotationQuery>,
) -> Result<Response, ApiError> {
    let path = annotation_path(&state.resolve(&id)?);
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(_) => {
            return Err(ApiError {
                status: StatusCode::NOT_FOUND,
                message: format!("image {id:?} has no annotation"),
                fields: Vec::new(),
            })
        }
    };
    let version = version_of(&bytes);
    let resp = if q.format.as_deref() == Some("xml") {
        ([(header::CONTENT_TYPE, "application/xml")], bytes).into_response()
    } else {
        let a = parse_voc_xml(&bytes).map_err(ApiError::internal)?;
        Json(AnnotationJson::from(&a)).into_response()
    };
    Ok(with_version(resp, &version))
}

/// Checks a submitted annotation field by field.
fn check_fields(a: &AnnotationJson, labels: &LabelMap, image_dims: Option<(usize, usize)>) -> Vec<FieldError> {
    let mut errs = Vec::new();
    let mut err = |field: String, message: String| errs.push(FieldError { field, message });
    if a.width <= 0 || a.width > u32::MAX as i64 {
        err("width".into(), format!("width {} must be a positive integer", a.width));
    }
    if a.height <= 0 || a.height > u32::MAX as i64 {
        err("height".into(), format!("height {} must be a positive integer", a.height));
    }
    if let Some((w, h)) = image_dims {
        if (a.width, a.height) != (w as i64, h as i64) {
            err("width".into(), format!("image is {w}x{h}, annotation says {}x{}", a.width, a.height));
        }
    }
    for (i, o) in a.objects.iter().enumerate() {
        if labels.id_of(&o.label).is_none() {
            err(format!("objects[{i}].label"), format!("unknown label {:?}", o.label));
        }
        for (name, v) in [("xmin", o.xmin), ("ymin", o.ymin), ("xmax", o.xmax), ("ymax", o.ymax)] {
            if v < 0 {
                err(format!("objects[{i}].{name}"), format!("{name} {v} is negative"));
            }
        }
        if o.xmin >= o.xmax {
            err(format!("objects[{i}].xmax"), format!("xmax {} must exceed xmin {}", o.xmax, o.xmin));
        }
        if o.ymin >= o.ymax {
            err(format!("objects[{i}].ymax"), format!("ymax {} must exceed ymin {}", o.ymax, o.ymin));
        }
        if o.xmax > a.width {
            err(format!("objects[{i}].xmax"), format!("xmax {} beyond width {}", o.xmax, a.width));
        }
        if o.ymax > a.height {
            err(format!("objects[{i}].ymax"), format!("ymax {} beyond height {}", o.ymax, a.height));
        }
    }
    errs
}

fn is_xml(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.contains("xml"))
}

async fn put_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let image = state.resolve(&id)?;
    let submitted = if is_xml(&headers) {
        match parse_voc_xml(&body) {
            Ok(a) => AnnotationJson::from(&a),
            Err(e) => return Err(ApiError::invalid(e.to_string(), Vec::new())),
        }
    } else {
        serde_json::from_slice::<AnnotationJson>(&body)
            .map_err(|e| ApiError::invalid(format!("malformed annotation body: {e}"), Vec::new()))?
    };
    let format = image_format(&image).unwrap_or("");
    let bytes = tokio::fs::read(&image).await.map_err(ApiError::internal)?;
    let dims = probe_dimensions(format, &bytes).ok();
    let fields = check_fields(&submitted, &state.labels, dims);
    if !fields.is_empty() {
        let names: Vec<&str> = fields.iter().map(|f| f.message.as_str()).collect();
        return Err(ApiError::invalid(names.join("; "), fields));
    }

    let folder = image
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let filename = image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ann = Annotation::new(folder, filename, submitted.width as u32, submitted.height as u32);
    ann.objects = submitted
        .objects
        .iter()
        .map(|o| {
            VocObject::new(
                o.label.clone(),
                PixelBox {
                    xmin: o.xmin as u32,
                    ymin: o.ymin as u32,
                    xmax: o.xmax as u32,
                    ymax: o.ymax as u32,
                },
            )
        })
        .collect();
    let xml = match write_voc_xml(&ann) {
        Ok(x) => x,
        Err(e @ Error::ValidationError(_)) => return Err(ApiError::invalid(e.to_string(), Vec::new())),
        Err(e) => return Err(ApiError::internal(e)),
    };

    let target = annotation_path(&image);
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    let previous = tokio::fs::read(&target).await.ok().map(|b| version_of(&b));
    let version = version_of(&xml);
    let write_target = target.clone();
    tokio::task::spawn_blocking(move || write_atomic(&write_target, &xml))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    log::info!("saved {} ({} objects)", target.display(), ann.objects.len());

    let mut resp = with_version(Json(AnnotationJson::from(&ann)).into_response(), &version);
    if let Some(prev) = previous.and_then(|p| HeaderValue::from_str(&p).ok()) {
        resp.headers_mut().insert(REPLACED_HEADER, prev);
    }
    Ok(resp)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/labelmap", get(get_labelmap))
        .route("/api/images", get(get_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/images/{id}/annotation", get(get_annotation).put(put_annotation))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(root: &Path, labels: LabelMap, addr: SocketAddr) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(root, labels)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
