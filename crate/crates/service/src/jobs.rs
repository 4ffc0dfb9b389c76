//! Job records and requests.

use serde::{Deserialize, Serialize};

use layoutdiff_core::layout::EditDoc;
use layoutdiff_core::orchestrator::{GenerationConfig, ParallelismMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Edit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    fn may_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Queued, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    /// Hash of the latent snapshot, served by `GET /images/{hash}`.
    pub latent_hash: String,
    pub preview_hash: String,
    pub preview_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: JobProgress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Job {
    pub fn queued(id: String, session_id: String, kind: JobKind, total: usize) -> Self {
        Job {
            id,
            session_id,
            kind,
            status: JobStatus::Queued,
            progress: JobProgress { completed: 0, total },
            result: None,
            error: None,
        }
    }

    /// Moves along queued -> running -> done | failed. Any other
    /// transition is refused and leaves the job untouched.
    pub fn transition(&mut self, next: JobStatus) -> bool {
        if !self.status.may_become(next) {
            return false;
        }
        self.status = next;
        true
    }

    /// Progress never moves backwards and freezes once the job is over.
    pub fn advance(&mut self, completed: usize) {
        if !self.status.is_terminal() {
            self.progress.completed = self.progress.completed.max(completed.min(self.progress.total));
        }
    }
}

/// Optional per-job overrides of the generation settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobOptions {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub two_stage: Option<bool>,
    pub use_background_path: Option<bool>,
    pub mode: Option<ParallelismMode>,
    pub guidance: Option<f32>,
}

impl JobOptions {
    pub fn resolve(&self, channels: usize, default_steps: usize) -> GenerationConfig {
        let d = GenerationConfig::default();
        GenerationConfig {
            steps: self.steps.unwrap_or(default_steps),
            seed: self.seed.unwrap_or(d.seed),
            use_background_path: self.use_background_path.unwrap_or(d.use_background_path),
            two_stage: self.two_stage.unwrap_or(d.two_stage),
            mode: self.mode.unwrap_or(d.mode),
            channels,
            guidance: self.guidance.unwrap_or(d.guidance),
            retries: d.retries,
        }
    }
}

/// Body of `POST /sessions/{id}/jobs`.
///
/// ```json
/// {"kind": "generate", "config": {"steps": 30, "seed": 7}}
/// {"kind": "edit", "edits": [{"op": "remove_object", "id": "a"}]}
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobRequest {
    Generate {
        #[serde(default)]
        config: JobOptions,
    },
    Edit {
        edits: Vec<EditDoc>,
        #[serde(default)]
        config: JobOptions,
    },
}

impl JobRequest {
    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Generate { .. } => JobKind::Generate,
            JobRequest::Edit { .. } => JobKind::Edit,
        }
    }

    pub fn options(&self) -> &JobOptions {
        match self {
            JobRequest::Generate { config } | JobRequest::Edit { config, .. } => config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_moves_forward_only() {
        let mut j = Job::queued("j".into(), "s".into(), JobKind::Generate, 10);
        assert!(!j.transition(JobStatus::Done));
        assert!(j.transition(JobStatus::Running));
        assert!(!j.transition(JobStatus::Queued));
        assert!(j.transition(JobStatus::Done));
        assert!(!j.transition(JobStatus::Failed));
        assert!(!j.transition(JobStatus::Running));
        assert_eq!(j.status, JobStatus::Done);
    }

    #[test]
    fn progress_is_monotone_and_frozen_when_terminal() {
        let mut j = Job::queued("j".into(), "s".into(), JobKind::Edit, 10);
        j.transition(JobStatus::Running);
        j.advance(4);
        j.advance(2);
        assert_eq!(j.progress.completed, 4);
        j.advance(40);
        assert_eq!(j.progress.completed, 10);
        let mut k = Job::queued("k".into(), "s".into(), JobKind::Edit, 10);
        k.transition(JobStatus::Failed);
        k.advance(3);
        assert_eq!(k.progress.completed, 0);
    }

    #[test]
    fn requests_parse_by_kind() {
        let r: JobRequest = serde_json::from_str(r#"{"kind":"generate","config":{"steps":3}}"#).unwrap();
        assert_eq!(r.kind(), JobKind::Generate);
        assert_eq!(r.options().resolve(4, 50).steps, 3);
        let r: JobRequest =
            serde_json::from_str(r#"{"kind":"edit","edits":[{"op":"remove_object","id":"a"}]}"#).unwrap();
        assert_eq!(r.kind(), JobKind::Edit);
        assert_eq!(r.options().resolve(4, 50).steps, 50);
        assert!(serde_json::from_str::<JobRequest>(r#"{"kind":"generate","config":{"stpes":3}}"#).is_err());
    }
}
