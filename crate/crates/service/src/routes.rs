//! HTTP surface of the service.

use std::future::Future;
use std::io;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::app::{PreviewKind, Service, ServiceError};
use crate::jobs::JobRequest;

const BODY_LIMIT: usize = 64 * 1024 * 1024;
pub const LATENT_HASH_HEADER: &str = "x-latent-hash";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = match &self {
            ServiceError::Invalid { message, violations } => json!({"error": message, "violations": violations}),
            other => json!({"error": other.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ServiceError::Internal(format!("worker failed: {e}"))))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ServiceError> {
    let created = blocking(move || svc.create_session(&body)).await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let view = svc.session(&id)?;
    let mut resp = ([(header::CONTENT_TYPE, "application/json")], view.layout).into_response();
    if let Some(h) = view.latent_hash.and_then(|h| HeaderValue::from_str(&h).ok()) {
        resp.headers_mut().insert(LATENT_HASH_HEADER, h);
    }
    Ok(resp)
}

#[derive(Deserialize)]
struct PreviewQuery {
    kind: PreviewKind,
}

async fn preview(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> Result<Response, ServiceError> {
    let bytes = blocking(move || svc.preview(&id, q.kind)).await?;
    Ok(png(bytes))
}

async fn submit_job(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let request: JobRequest = serde_json::from_slice(&body).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ServiceError::Invalid {
            message: format!("invalid job request: {e}"),
            violations: Vec::new(),
        },
        _ => ServiceError::BadRequest(format!("malformed job request: {e}")),
    })?;
    let job = blocking(move || svc.submit_job(&id, request)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.job(&id)?).into_response())
}

async fn image(State(svc): State<Arc<Service>>, Path(hash): Path<String>) -> Result<Response, ServiceError> {
    let (bytes, media) = blocking(move || svc.image(&hash)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, media),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/preview", get(preview))
        .route("/sessions/:id/jobs", post(submit_job))
        .route("/jobs/:id", get(get_job))
        .route("/images/:hash", get(image))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(service)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    service: Arc<Service>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}
