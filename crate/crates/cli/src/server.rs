//! HTTP/JSON front end for an [`AnnotationService`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use stablelabel::pipeline::PipelineParams;
use stablelabel::service::{AnnotationService, NextPacket, ProgressSnapshot, ServiceError, SubmitAck};

/// Lease length when the client does not ask for one.
pub const DEFAULT_LEASE_SECS: u64 = 300;

const IMAGE_TYPES: [(&str, &str); 4] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("pgm", "image/x-portable-graymap"),
];

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<AnnotationService>,
    /// Directory holding `<frame_index>.<ext>` images.
    pub images: Option<PathBuf>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue/next", get(next_packet))
        .route("/api/queue/{id}/labels", post(submit_labels))
        .route("/api/progress", get(progress))
        .route("/api/params", get(get_params).put(put_params))
        .route("/api/states", get(states))
        .route("/api/frames/{index}", get(frame))
        .route("/api/frames/{index}/image", get(frame_image))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        match e {
            ServiceError::UnknownEntry(_) => Self::new(StatusCode::NOT_FOUND, message),
            ServiceError::NotLeased(_) | ServiceError::AlreadyCompleted(_) | ServiceError::AlreadyStarted => {
                Self::new(StatusCode::CONFLICT, message)
            }
            ServiceError::FrameMismatch { missing, extra } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": message, "missing": missing, "extra": extra }),
            },
            ServiceError::UnknownState(bad) => {
                let unknown: Vec<_> = bad.iter().map(|(f, s)| json!({ "frame": f, "state": s })).collect();
                Self {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: json!({ "error": message, "unknown": unknown }),
                }
            }
            ServiceError::Params(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, message),
            ServiceError::Log { .. } | ServiceError::Diverged(_) | ServiceError::Io(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Service calls may wait on the pipeline thread, so they run off the
/// async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

#[derive(Deserialize)]
struct LeaseQuery {
    /// Seconds.
    lease: Option<u64>,
}

async fn next_packet(State(app): State<AppState>, Query(q): Query<LeaseQuery>) -> ApiResult<NextPacket> {
    let lease_ms = q.lease.unwrap_or(DEFAULT_LEASE_SECS).saturating_mul(1000);
    let service = app.service.clone();
    blocking(move || Ok(service.next_packet(lease_ms)?)).await.map(Json)
}

#[derive(Deserialize)]
struct LabelsBody {
    labels: BTreeMap<String, String>,
}

async fn submit_labels(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Json(body): Json<LabelsBody>,
) -> ApiResult<SubmitAck> {
    let mut labels = BTreeMap::new();
    for (frame, state) in body.labels {
        let index = frame
            .parse::<u64>()
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("{frame:?} is not a frame index")))?;
        labels.insert(index, state);
    }
    let service = app.service.clone();
    blocking(move || Ok(service.submit_labels(id, &labels)?)).await.map(Json)
}

async fn progress(State(app): State<AppState>) -> Json<ProgressSnapshot> {
    Json(app.service.progress())
}

async fn get_params(State(app): State<AppState>) -> Json<PipelineParams> {
    Json(app.service.params())
}

async fn put_params(State(app): State<AppState>, Json(params): Json<PipelineParams>) -> ApiResult<PipelineParams> {
    Ok(Json(app.service.set_params(params)?))
}

async fn states(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.service.states().names().to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameView {
    pub frame_index: u64,
    pub object_present: bool,
    pub class_probs: Option<Vec<f64>>,
    pub change_score: Option<f64>,
    pub image: Option<ImageView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageView {
    pub mime: String,
    pub base64: String,
}

fn find_image(dir: &FsPath, index: u64) -> Option<(PathBuf, &'static str)> {
    IMAGE_TYPES
        .iter()
        .map(|(ext, mime)| (dir.join(format!("{index}.{ext}")), *mime))
        .find(|(p, _)| p.is_file())
}

async fn read_image(app: &AppState, index: u64) -> Result<Option<(Vec<u8>, &'static str)>, ApiError> {
    let Some(dir) = app.images.clone() else {
        return Ok(None);
    };
    blocking(move || {
        let Some((path, mime)) = find_image(&dir, index) else {
            return Ok(None);
        };
        let bytes = std::fs::read(path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        Ok(Some((bytes, mime)))
    })
    .await
}

async fn frame(State(app): State<AppState>, Path(index): Path<u64>) -> ApiResult<FrameView> {
    let record = app
        .service
        .frame(index)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no frame {index}")))?;
    let image = read_image(&app, index).await?.map(|(bytes, mime)| ImageView {
        mime: mime.to_string(),
        base64: base64::engine::general_purpose::STANDARD.encode(bytes),
    });
    Ok(Json(FrameView {
        frame_index: record.frame_index,
        object_present: record.object_present,
        class_probs: record.class_probs,
        change_score: record.change_score,
        image,
    }))
}

async fn frame_image(State(app): State<AppState>, Path(index): Path<u64>) -> Result<Response, ApiError> {
    match read_image(&app, index).await? {
        Some((bytes, mime)) => Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no image for frame {index}"))),
    }
}
