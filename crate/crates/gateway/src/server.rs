//! Reference HTTP server exposing any in-process [`Denoiser`] over the step
//! protocol. `PUT /v1/references/{id}` carries reference images to the
//! backend before steps name them.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use log::{error, info};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use layoutdiff_core::denoise::{Conditioning, DenoiseError, Denoiser, StepFailure, StepInput};
use layoutdiff_core::export::decode_depth_png;
use layoutdiff_core::raster::DepthMap;

use crate::wire::{decode_bytes, ReferenceUpload, StepRequest, StepResponse, TensorPayload, WireError};

const BODY_LIMIT: usize = 512 * 1024 * 1024;

struct ServerState {
    backend: Arc<dyn Denoiser>,
    // the same control map arrives once per path; decode it once
    depth_cache: Mutex<Vec<(String, Arc<DepthMap>)>>,
}

impl ServerState {
    fn depth(&self, encoded: &str) -> Result<Arc<DepthMap>, String> {
        {
            let cache = self.depth_cache.lock().unwrap();
            if let Some((_, d)) = cache.iter().find(|(k, _)| k == encoded) {
                return Ok(d.clone());
            }
        }
        let png = decode_bytes(encoded).map_err(|e| e.0)?;
        let codes = decode_depth_png(&png).map_err(|e| format!("bad depth png: {e}"))?;
        let depth = Arc::new(codes.to_depth_map());
        let mut cache = self.depth_cache.lock().unwrap();
        if cache.len() >= 8 {
            cache.remove(0);
        }
        cache.push((encoded.to_owned(), depth.clone()));
        Ok(depth)
    }
}

type Failure = (StatusCode, WireError);

fn malformed(req: &StepRequest, message: String) -> Failure {
    (
        StatusCode::BAD_REQUEST,
        WireError {
            error: message,
            kind: StepFailure::Malformed,
            path_id: Some(req.path_id.clone()),
            timestep: Some(req.timestep),
        },
    )
}

fn backend_failure(e: DenoiseError) -> Failure {
    match e {
        DenoiseError::Step { path, timestep, kind, message } => (
            StatusCode::UNPROCESSABLE_ENTITY,
            WireError {
                error: message,
                kind,
                path_id: Some(path),
                timestep: Some(timestep),
            },
        ),
        other => (
            StatusCode::INTERNAL_SERVER_ERROR,
            WireError {
                error: other.to_string(),
                kind: StepFailure::Backend,
                path_id: None,
                timestep: None,
            },
        ),
    }
}

fn run_steps(state: &ServerState, requests: Vec<StepRequest>) -> Result<Vec<StepResponse>, Failure> {
    if requests.is_empty() {
        return Err((
            StatusCode::BAD_REQUEST,
            WireError {
                error: "empty batch".into(),
                kind: StepFailure::Malformed,
                path_id: None,
                timestep: None,
            },
        ));
    }
    let mut latents = Vec::with_capacity(requests.len());
    let mut conds = Vec::with_capacity(requests.len());
    for r in &requests {
        latents.push(r.latent.decode().map_err(|e| malformed(r, e.0))?);
        let depth = state.depth(&r.conditioning.depth_png).map_err(|m| malformed(r, m))?;
        conds.push(Conditioning {
            prompt: r.conditioning.prompt.clone(),
            control_depth: depth,
            reference_id: r.conditioning.reference_id.clone(),
            guidance: r.conditioning.guidance,
        });
    }
    let inputs: Vec<StepInput<'_>> = requests
        .iter()
        .zip(latents.iter().zip(&conds))
        .map(|(r, (latent, conditioning))| StepInput {
            path: &r.path_id,
            timestep: r.timestep,
            latent,
            conditioning,
            seed: r.seed,
        })
        .collect();
    let out = state.backend.step_batch(&inputs).map_err(backend_failure)?;
    Ok(requests
        .iter()
        .zip(out)
        .map(|(r, t)| StepResponse {
            path_id: r.path_id.clone(),
            timestep: r.timestep,
            latent: TensorPayload::encode(&t),
        })
        .collect())
}

async fn step(State(state): State<Arc<ServerState>>, Json(requests): Json<Vec<StepRequest>>) -> Response {
    match tokio::task::spawn_blocking(move || run_steps(&state, requests)).await {
        Ok(Ok(responses)) => Json(responses).into_response(),
        Ok(Err((status, body))) => (status, Json(body)).into_response(),
        Err(e) => {
            error!("step task failed: {e}");
            (StatusCode::INTERNAL_SERVER_ERROR, "step task failed").into_response()
        }
    }
}

async fn health(State(state): State<Arc<ServerState>>) -> Response {
    Json(state.backend.descriptor()).into_response()
}

async fn put_reference(
    State(state): State<Arc<ServerState>>,
    Path(id): Path<String>,
    Json(upload): Json<ReferenceUpload>,
) -> Response {
    let reference = match upload.decode() {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.0).into_response(),
    };
    if reference.id != id {
        return (StatusCode::BAD_REQUEST, format!("content hashes to {}, not {id}", reference.id)).into_response();
    }
    match state.backend.register_reference(&reference) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    }
}

pub fn router(backend: Arc<dyn Denoiser>) -> Router {
    let state = Arc::new(ServerState {
        backend,
        depth_cache: Mutex::new(Vec::new()),
    });
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/step", post(step))
        .route("/v1/references/:id", put(put_reference))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves `backend` on `listener` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, backend: Arc<dyn Denoiser>, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    axum::serve(listener, router(backend))
        .tcp_nodelay(true)
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own thread and runtime; stops on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn(backend: Arc<dyn Denoiser>, bind: &str) -> io::Result<ServerHandle> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name(format!("denoiser-server-{}", addr.port()))
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()?;
                rt.block_on(async move {
                    let listener = TcpListener::from_std(listener)?;
                    serve(listener, backend, async {
                        let _ = rx.await;
                    })
                    .await
                })
            })?;
        info!("denoiser server listening on {addr}");
        Ok(ServerHandle {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            match t.join() {
                Ok(Err(e)) => error!("denoiser server exited with {e}"),
                Err(_) => error!("denoiser server thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
