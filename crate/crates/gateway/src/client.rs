use std::io;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::debug;

use layoutdiff_core::denoise::{BackendDescriptor, DenoiseError, Denoiser, Reference, StepFailure, StepInput};
use layoutdiff_core::export::export_depth;
use layoutdiff_core::latent::LatentTensor;
use layoutdiff_core::raster::DepthMap;

use crate::wire::{encode_bytes, ReferenceUpload, StepRequest, StepResponse, TensorPayload, WireConditioning, WireError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(timeout)
        .timeout_connect(timeout.min(Duration::from_secs(10)))
        .build()
}

fn is_timeout(e: &ureq::Error) -> bool {
    let mut src: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(e);
    while let Some(s) = src {
        if let Some(io) = s.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        src = s.source();
    }
    e.to_string().contains("timed out")
}

fn trim(url: &str) -> &str {
    url.trim_end_matches('/')
}

/// Queries `GET /v1/health`.
pub fn health_check(endpoint: &str, timeout: Duration) -> Result<BackendDescriptor, DenoiseError> {
    let url = format!("{}/v1/health", trim(endpoint));
    let resp = agent(timeout)
        .get(&url)
        .call()
        .map_err(|e| DenoiseError::Unreachable(format!("{url}: {e}")))?;
    resp.into_json()
        .map_err(|e| DenoiseError::Unreachable(format!("{url}: malformed health response: {e}")))
}

type DepthEntry = (Arc<DepthMap>, Arc<String>);

/// A backend reached over HTTP. Cheap to clone; clones share the
/// connection pool.
#[derive(Clone)]
pub struct RemoteDenoiser {
    endpoint: String,
    agent: ureq::Agent,
    job_id: String,
    descriptor: BackendDescriptor,
    // control maps are shared by every path of a job; encode each once
    depth_cache: Arc<Mutex<Vec<DepthEntry>>>,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser")
            .field("endpoint", &self.endpoint)
            .field("job_id", &self.job_id)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl RemoteDenoiser {
    /// Connects and reads the backend descriptor.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, DenoiseError> {
        let descriptor = health_check(endpoint, timeout)?;
        Ok(Self::with_descriptor(endpoint, timeout, descriptor))
    }

    /// Skips the health probe when the descriptor is already known.
    pub fn with_descriptor(endpoint: &str, timeout: Duration, descriptor: BackendDescriptor) -> Self {
        RemoteDenoiser {
            endpoint: trim(endpoint).to_owned(),
            agent: agent(timeout),
            job_id: String::new(),
            descriptor,
            depth_cache: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Same connection, tagging requests with `job_id`.
    pub fn for_job(&self, job_id: impl Into<String>) -> Self {
        RemoteDenoiser {
            job_id: job_id.into(),
            ..self.clone()
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn depth_png(&self, depth: &Arc<DepthMap>) -> Result<Arc<String>, String> {
        {
            let cache = self.depth_cache.lock().unwrap();
            if let Some((_, s)) = cache.iter().find(|(d, _)| Arc::ptr_eq(d, depth)) {
                return Ok(s.clone());
            }
        }
        let png = export_depth(depth).map_err(|e| e.to_string())?;
        let s = Arc::new(encode_bytes(&png));
        let mut cache = self.depth_cache.lock().unwrap();
        if cache.len() >= 8 {
            cache.remove(0);
        }
        cache.push((depth.clone(), s.clone()));
        Ok(s)
    }

    fn request(&self, input: &StepInput<'_>) -> Result<StepRequest, DenoiseError> {
        let c = input.conditioning;
        let depth = self
            .depth_png(&c.control_depth)
            .map_err(|m| DenoiseError::step(input, StepFailure::Malformed, m))?;
        Ok(StepRequest {
            job_id: self.job_id.clone(),
            path_id: input.path.to_owned(),
            timestep: input.timestep,
            latent: TensorPayload::encode(input.latent),
            conditioning: WireConditioning {
                prompt: c.prompt.clone(),
                depth_png: (*depth).clone(),
                reference_id: c.reference_id.clone(),
                guidance: c.guidance,
            },
            seed: input.seed,
        })
    }

    fn transport_error(&self, input: &StepInput<'_>, e: ureq::Error) -> DenoiseError {
        if let ureq::Error::Status(code, resp) = e {
            let body = resp.into_string().unwrap_or_default();
            return match serde_json::from_str::<WireError>(&body) {
                Ok(w) => DenoiseError::Step {
                    path: w.path_id.unwrap_or_else(|| input.path.to_owned()),
                    timestep: w.timestep.unwrap_or(input.timestep),
                    kind: w.kind,
                    message: w.error,
                },
                Err(_) => DenoiseError::step(input, StepFailure::Backend, format!("HTTP {code}: {body}")),
            };
        }
        let kind = if is_timeout(&e) { StepFailure::Timeout } else { StepFailure::Transport };
        DenoiseError::step(input, kind, format!("{}: {e}", self.endpoint))
    }
}

impl Denoiser for RemoteDenoiser {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor.clone()
    }

    fn step(&self, input: &StepInput<'_>) -> Result<LatentTensor, DenoiseError> {
        let mut out = self.step_batch(std::slice::from_ref(input))?;
        Ok(out.remove(0))
    }

    /// One POST for the whole batch. Responses are checked against the
    /// requests before anything is returned, so a bad batch yields nothing.
    fn step_batch(&self, batch: &[StepInput<'_>]) -> Result<Vec<LatentTensor>, DenoiseError> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let requests = batch.iter().map(|i| self.request(i)).collect::<Result<Vec<_>, _>>()?;
        let url = format!("{}/v1/step", self.endpoint);
        debug!("POST {url} with {} paths at t={}", batch.len(), first.timestep);
        let resp = self
            .agent
            .post(&url)
            .send_json(&requests)
            .map_err(|e| self.transport_error(first, e))?;
        let responses: Vec<StepResponse> = resp.into_json().map_err(|e| {
            let kind = if e.kind() == io::ErrorKind::TimedOut { StepFailure::Timeout } else { StepFailure::Malformed };
            DenoiseError::step(first, kind, format!("unreadable response: {e}"))
        })?;
        if responses.len() != batch.len() {
            return Err(DenoiseError::step(
                first,
                StepFailure::Malformed,
                format!("{} responses for {} requests", responses.len(), batch.len()),
            ));
        }
        batch
            .iter()
            .zip(responses)
            .map(|(input, r)| {
                if r.path_id != input.path || r.timestep != input.timestep {
                    return Err(DenoiseError::step(
                        input,
                        StepFailure::Malformed,
                        format!("response for {} at {} out of order", r.path_id, r.timestep),
                    ));
                }
                let t = r
                    .latent
                    .decode()
                    .map_err(|e| DenoiseError::step(input, StepFailure::Malformed, e.0))?;
                if t.shape() != input.latent.shape() {
                    return Err(DenoiseError::step(
                        input,
                        StepFailure::ShapeMismatch,
                        format!("expected {:?}, got {:?}", input.latent.shape(), t.shape()),
                    ));
                }
                Ok(t)
            })
            .collect()
    }

    fn register_reference(&self, reference: &Reference) -> Result<(), DenoiseError> {
        let url = format!("{}/v1/references/{}", self.endpoint, reference.id);
        self.agent
            .put(&url)
            .send_json(ReferenceUpload::encode(reference))
            .map_err(|e| match e {
                ureq::Error::Status(code, r) => {
                    DenoiseError::Reference(format!("HTTP {code}: {}", r.into_string().unwrap_or_default()))
                }
                other => DenoiseError::Reference(format!("{url}: {other}")),
            })?;
        Ok(())
    }
}
