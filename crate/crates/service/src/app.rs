//! Sessions, jobs and their persistence, independent of the HTTP layer.

use std::collections::HashMap;
use std::panic::AssertUnwindSafe;
use std::sync::{Arc, Mutex, MutexGuard};

use log::{error, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use layoutdiff_core::denoise::{check_compatible, Denoiser};
use layoutdiff_core::export::{export_depth, export_masks};
use layoutdiff_core::latent::{read_snapshot, write_snapshot, LatentTensor};
use layoutdiff_core::layout::{load_layout, save_layout, LayoutError};
use layoutdiff_core::orchestrator::{
    edit_apply, generate_scene, latent_shape, regenerate_view, GenerationConfig, Progress, RunContext,
};
use layoutdiff_core::raster::{render_depth, render_masks};
use layoutdiff_core::scene::{apply_edits, diff_scenes, validate_scene, EditError, Scene, SceneEdit, Violation};
use layoutdiff_core::toy::{decode_preview, ToyDenoiser, ToySchedule};
use layoutdiff_gateway::RemoteDenoiser;

use crate::config::ServiceConfig;
use crate::jobs::{Job, JobKind, JobRequest, JobResult, JobStatus};
use crate::store::{SessionManifest, Store};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{message}")]
    Invalid {
        message: String,
        violations: Vec<Violation>,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Invalid { .. } => 422,
            ServiceError::Conflict(_) => 409,
            ServiceError::Precondition(_) => 412,
            ServiceError::Unavailable(_) => 503,
            ServiceError::Internal(_) => 500,
        }
    }

    fn invalid(violations: Vec<Violation>) -> Self {
        let message = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        ServiceError::Invalid { message, violations }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Internal(format!("storage: {e}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreviewKind {
    Depth,
    Masks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub warnings: Vec<String>,
}

/// The committed layout of a session, as served to clients.
#[derive(Clone, Debug)]
pub struct SessionView {
    pub layout: Vec<u8>,
    pub latent_hash: Option<String>,
    pub reference_id: Option<String>,
}

struct Session {
    scene: Scene,
    layout_hash: String,
    latent: Option<Arc<LatentTensor>>,
    latent_hash: Option<String>,
    reference_id: Option<String>,
    jobs: Vec<String>,
    running: Option<String>,
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, Session>,
    jobs: HashMap<String, Job>,
}

/// Inputs of one job, captured at submission.
struct Work {
    job_id: String,
    session_id: String,
    old_scene: Scene,
    new_scene: Scene,
    latent: Option<Arc<LatentTensor>>,
    config: GenerationConfig,
}

struct Outcome {
    scene: Scene,
    latent: LatentTensor,
    reference_id: Option<String>,
}

pub struct Service {
    config: ServiceConfig,
    store: Store,
    state: Mutex<State>,
    previews: Mutex<HashMap<(String, PreviewKind), String>>,
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

fn layout_error(e: LayoutError) -> ServiceError {
    match e {
        LayoutError::Parse { .. } => ServiceError::BadRequest(e.to_string()),
        LayoutError::SchemaVersion { .. } => ServiceError::invalid(vec![Violation {
            field: "schema_version".into(),
            rule: e.to_string(),
        }]),
    }
}

fn edit_error(e: EditError) -> ServiceError {
    match e {
        EditError::Invalid(v) => ServiceError::invalid(v),
        other => ServiceError::Invalid {
            message: other.to_string(),
            violations: Vec::new(),
        },
    }
}

impl Service {
    /// Opens the data directory and reloads every committed session.
    pub fn open(config: ServiceConfig) -> Result<Arc<Service>, ServiceError> {
        config.validate().map_err(|e| ServiceError::Internal(e.to_string()))?;
        let store = Store::open(&config.data_dir)?;
        let mut state = State::default();
        for m in store.manifests()? {
            let corrupt = |what: String| ServiceError::Internal(format!("session {}: {what}", m.id));
            let layout = store.get_verified(&m.layout)?;
            let scene = load_layout(&layout).map_err(|e| corrupt(e.to_string()))?.scene;
            let latent = match &m.latent {
                Some(h) => {
                    let t = read_snapshot(&store.get_verified(h)?).map_err(|e| corrupt(e.to_string()))?;
                    Some(Arc::new(t))
                }
                None => None,
            };
            let mut job_ids = Vec::with_capacity(m.jobs.len());
            let mut interrupted = false;
            for mut job in m.jobs.iter().cloned() {
                if !job.status.is_terminal() {
                    job.status = JobStatus::Failed;
                    job.error = Some("interrupted by a service restart".into());
                    interrupted = true;
                }
                job_ids.push(job.id.clone());
                state.jobs.insert(job.id.clone(), job);
            }
            let id = m.id.clone();
            let session = Session {
                scene,
                layout_hash: m.layout.clone(),
                latent,
                latent_hash: m.latent.clone(),
                reference_id: m.reference_id.clone(),
                jobs: job_ids,
                running: None,
            };
            if interrupted {
                let fixed = SessionManifest {
                    jobs: session.jobs.iter().filter_map(|j| state.jobs.get(j)).cloned().collect(),
                    ..m
                };
                store.write_manifest(&fixed)?;
            }
            state.sessions.insert(id, session);
        }
        info!(
            "loaded {} sessions from {}",
            state.sessions.len(),
            store.root().display()
        );
        Ok(Arc::new(Service {
            config,
            store,
            state: Mutex::new(state),
            previews: Mutex::new(HashMap::new()),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn state(&self) -> MutexGuard<'_, State> {
        // a panicking job thread must not take the whole service down
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn manifest(&self, id: &str, s: &Session, jobs: &HashMap<String, Job>) -> SessionManifest {
        SessionManifest {
            id: id.to_owned(),
            layout: s.layout_hash.clone(),
            latent: s.latent_hash.clone(),
            reference_id: s.reference_id.clone(),
            jobs: s
                .jobs
                .iter()
                .filter_map(|j| jobs.get(j))
                .cloned()
                .collect(),
        }
    }

    fn check_scene(&self, scene: &Scene) -> Result<(), ServiceError> {
        let mut report = validate_scene(scene);
        if latent_shape(&scene.camera, self.config.channels).is_err() {
            report.push(Violation {
                field: "camera.resolution".into(),
                rule: "width and height must be multiples of 8".into(),
            });
        }
        if report.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::invalid(report))
        }
    }

    pub fn create_session(&self, document: &[u8]) -> Result<Created, ServiceError> {
        let loaded = load_layout(document).map_err(layout_error)?;
        self.check_scene(&loaded.scene)?;
        let layout_hash = self.store.put(&save_layout(&loaded.scene))?;
        let id = new_id();
        let session = Session {
            scene: loaded.scene,
            layout_hash,
            latent: None,
            latent_hash: None,
            reference_id: None,
            jobs: Vec::new(),
            running: None,
        };
        let mut st = self.state();
        self.store.write_manifest(&self.manifest(&id, &session, &st.jobs))?;
        st.sessions.insert(id.clone(), session);
        info!("created session {id}");
        Ok(Created {
            id,
            warnings: loaded.warnings,
        })
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ServiceError> {
        let st = self.state();
        let s = st.sessions.get(id).ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
        Ok(SessionView {
            layout: save_layout(&s.scene),
            latent_hash: s.latent_hash.clone(),
            reference_id: s.reference_id.clone(),
        })
    }

    /// Control-signal preview of the committed scene. Cached by layout hash.
    pub fn preview(&self, id: &str, kind: PreviewKind) -> Result<Vec<u8>, ServiceError> {
        let (scene, layout_hash) = {
            let st = self.state();
            let s = st.sessions.get(id).ok_or_else(|| ServiceError::NotFound(format!("session {id}")))?;
            (s.scene.clone(), s.layout_hash.clone())
        };
        let key = (layout_hash, kind);
        let cached = self.previews.lock().unwrap_or_else(|e| e.into_inner()).get(&key).cloned();
        if let Some(hash) = cached {
            if let Some(bytes) = self.store.get(&hash)? {
                return Ok(bytes);
            }
        }
        let bytes = match kind {
            PreviewKind::Depth => export_depth(&render_depth(&scene)),
            PreviewKind::Masks => export_masks(&render_masks(&scene)),
        }
        .map_err(|e| ServiceError::Internal(format!("preview export: {e}")))?;
        let hash = self.store.put(&bytes)?;
        self.previews.lock().unwrap_or_else(|e| e.into_inner()).insert(key, hash);
        Ok(bytes)
    }

    pub fn job(&self, id: &str) -> Result<Job, ServiceError> {
        self.state()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    /// A stored blob with its media type.
    pub fn image(&self, hash: &str) -> Result<(Vec<u8>, &'static str), ServiceError> {
        let bytes = self
            .store
            .get(hash)?
            .ok_or_else(|| ServiceError::NotFound(format!("image {hash}")))?;
        let media = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            "image/png"
        } else if bytes.starts_with(b"{") {
            "application/json"
        } else {
            "application/octet-stream"
        };
        Ok((bytes, media))
    }

    fn denoiser(&self, config: &GenerationConfig, job_id: &str) -> Result<Arc<dyn Denoiser>, ServiceError> {
        if self.config.uses_toy() {
            return Ok(Arc::new(ToyDenoiser::new(ToySchedule::linear(config.steps), config.channels)));
        }
        let remote = RemoteDenoiser::connect(&self.config.backend, self.config.backend_timeout())
            .map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        check_compatible(&remote.descriptor(), config.channels).map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        Ok(Arc::new(remote.for_job(job_id)))
    }

    /// Validates and queues a job; it runs on its own thread. Blocks for the
    /// backend health probe.
    pub fn submit_job(self: &Arc<Self>, session_id: &str, request: JobRequest) -> Result<Job, ServiceError> {
        let config = request.options().resolve(self.config.channels, self.config.default_steps);
        let (old_scene, new_scene, latent) = {
            let st = self.state();
            let s = st
                .sessions
                .get(session_id)
                .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
            if let Some(j) = &s.running {
                return Err(ServiceError::Conflict(format!("job {j} is still running on this session")));
            }
            config.validate().map_err(|e| ServiceError::Invalid {
                message: e.to_string(),
                violations: Vec::new(),
            })?;
            match &request {
                JobRequest::Generate { .. } => (s.scene.clone(), s.scene.clone(), None),
                JobRequest::Edit { edits, .. } => {
                    let z = s.latent.clone().ok_or_else(|| {
                        ServiceError::Precondition("edits need a generated image; run a generate job first".into())
                    })?;
                    let edits: Vec<SceneEdit> = edits.iter().map(SceneEdit::from).collect();
                    let next = apply_edits(&s.scene, &edits).map_err(edit_error)?;
                    self.check_scene(&next)?;
                    (s.scene.clone(), next, Some(z))
                }
            }
        };

        let job_id = new_id();
        let denoiser = self.denoiser(&config, &job_id)?;
        let regenerate = request.kind() == JobKind::Edit && needs_regeneration(&old_scene, &new_scene);
        let total = match request.kind() {
            JobKind::Generate if config.two_stage => 2 * config.steps,
            JobKind::Generate => config.steps,
            JobKind::Edit if regenerate => config.steps,
            JobKind::Edit => diff_scenes(&old_scene, &new_scene).len() * config.steps,
        };
        let job = Job::queued(job_id.clone(), session_id.to_owned(), request.kind(), total);
        {
            let mut st = self.state();
            let s = st
                .sessions
                .get_mut(session_id)
                .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
            // another submit may have won while the backend was probed
            if let Some(j) = &s.running {
                return Err(ServiceError::Conflict(format!("job {j} is still running on this session")));
            }
            s.running = Some(job_id.clone());
            s.jobs.push(job_id.clone());
            st.jobs.insert(job_id.clone(), job.clone());
            // the job is on disk before it is acknowledged
            let manifest = self.manifest(session_id, &st.sessions[session_id], &st.jobs);
            if let Err(e) = self.store.write_manifest(&manifest) {
                let s = st.sessions.get_mut(session_id).expect("checked above");
                s.running = None;
                s.jobs.pop();
                st.jobs.remove(&job_id);
                return Err(e.into());
            }
        }
        let work = Work {
            job_id: job_id.clone(),
            session_id: session_id.to_owned(),
            old_scene,
            new_scene,
            latent,
            config,
        };
        let me = Arc::clone(self);
        let spawned = std::thread::Builder::new()
            .name(format!("job-{}", &job_id[..8]))
            .spawn(move || me.run_job(work, denoiser));
        if let Err(e) = spawned {
            self.fail(&job_id, session_id, format!("could not start job: {e}"));
            return Err(ServiceError::Internal(format!("could not start job: {e}")));
        }
        info!("queued {:?} job {job_id} on session {session_id}", job.kind);
        Ok(job)
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.state().jobs.get_mut(id) {
            f(j);
        }
    }

    /// Rewrites the manifest so job statuses survive a crash.
    fn persist_jobs(&self, session_id: &str) {
        let st = self.state();
        if let Some(s) = st.sessions.get(session_id) {
            if let Err(e) = self.store.write_manifest(&self.manifest(session_id, s, &st.jobs)) {
                error!("could not record job status on session {session_id}: {e}");
            }
        }
    }

    fn run_job(self: Arc<Self>, work: Work, denoiser: Arc<dyn Denoiser>) {
        self.update_job(&work.job_id, |j| {
            j.transition(JobStatus::Running);
        });
        self.persist_jobs(&work.session_id);
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| self.execute(&work, denoiser.as_ref())))
            .unwrap_or_else(|_| Err("job panicked".into()));
        let committed = outcome.and_then(|o| self.commit(&work, o));
        if let Err(message) = committed {
            warn!("job {} failed: {message}", work.job_id);
            self.fail(&work.job_id, &work.session_id, message);
        }
    }

    fn execute(&self, work: &Work, denoiser: &dyn Denoiser) -> Result<Outcome, String> {
        let job_id = work.job_id.as_str();
        let progress = |p: Progress| {
            self.update_job(job_id, |j| {
                if !j.status.is_terminal() {
                    j.progress.total = p.total;
                }
                j.advance(p.completed);
            })
        };
        let ctx = RunContext::with_progress(&progress);
        let cfg = &work.config;
        let (latent, reference_id) = match &work.latent {
            None => {
                let g = generate_scene(&work.new_scene, denoiser, cfg, &ctx).map_err(|e| e.to_string())?;
                (g.latent, g.reference.map(|r| r.id))
            }
            Some(z) if needs_regeneration(&work.old_scene, &work.new_scene) => {
                let g = regenerate_view(&work.old_scene, &work.new_scene, z, denoiser, cfg, &ctx)
                    .map_err(|e| e.to_string())?;
                (g.latent, g.reference.map(|r| r.id))
            }
            Some(z) => {
                let latent =
                    edit_apply(&work.old_scene, &work.new_scene, z, denoiser, cfg, &ctx).map_err(|e| e.to_string())?;
                let reference_id = self.state().sessions.get(&work.session_id).and_then(|s| s.reference_id.clone());
                (latent, reference_id)
            }
        };
        Ok(Outcome {
            scene: work.new_scene.clone(),
            latent,
            reference_id,
        })
    }

    /// Writes the blobs, then swaps the manifest and the in-memory session
    /// under one lock. Until the manifest rename lands nothing is visible.
    fn commit(&self, work: &Work, o: Outcome) -> Result<(), String> {
        let storage = |e: std::io::Error| format!("storage: {e}");
        let layout_hash = self.store.put(&save_layout(&o.scene)).map_err(storage)?;
        let latent_hash = self.store.put(&write_snapshot(&o.latent)).map_err(storage)?;
        let preview = decode_preview(&o.latent).map_err(|e| format!("preview: {e}"))?;
        let preview_hash = self.store.put(&preview).map_err(storage)?;

        let mut guard = self.state();
        let st = &mut *guard;
        let mut job = st.jobs.get(&work.job_id).cloned().ok_or("job vanished")?;
        job.progress.completed = job.progress.total;
        if !job.transition(JobStatus::Done) {
            return Err(format!("job cannot finish from {:?}", job.status));
        }
        job.result = Some(JobResult {
            latent_hash: latent_hash.clone(),
            preview_url: format!("/images/{preview_hash}"),
            preview_hash,
        });
        let session = st.sessions.get(&work.session_id).ok_or("session vanished")?;
        let next = Session {
            scene: o.scene,
            layout_hash,
            latent: Some(Arc::new(o.latent)),
            latent_hash: Some(latent_hash),
            reference_id: o.reference_id,
            jobs: session.jobs.clone(),
            running: None,
        };
        let mut jobs_after = HashMap::new();
        for id in &next.jobs {
            if let Some(j) = st.jobs.get(id) {
                jobs_after.insert(id.clone(), if *id == job.id { job.clone() } else { j.clone() });
            }
        }
        self.store
            .write_manifest(&self.manifest(&work.session_id, &next, &jobs_after))
            .map_err(storage)?;
        st.sessions.insert(work.session_id.clone(), next);
        st.jobs.insert(job.id.clone(), job);
        info!("job {} committed to session {}", work.job_id, work.session_id);
        Ok(())
    }

    /// Marks the job failed and releases the session; scene and latent keep
    /// their committed values.
    fn fail(&self, job_id: &str, session_id: &str, message: String) {
        let mut guard = self.state();
        let st = &mut *guard;
        if let Some(j) = st.jobs.get_mut(job_id) {
            j.transition(JobStatus::Failed);
            j.error = Some(message);
        }
        if let Some(s) = st.sessions.get_mut(session_id) {
            if s.running.as_deref() == Some(job_id) {
                s.running = None;
            }
            let manifest = self.manifest(session_id, s, &st.jobs);
            if let Err(e) = self.store.write_manifest(&manifest) {
                error!("could not record failure of job {job_id}: {e}");
            }
        }
    }
}

fn needs_regeneration(old: &Scene, new: &Scene) -> bool {
    diff_scenes(old, new)
        .iter()
        .any(|e| matches!(e, SceneEdit::SetCamera(_) | SceneEdit::SetBackgroundPrompt(_)))
}
