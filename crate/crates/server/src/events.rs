//! Per-job fan-out of state changes and progress to SSE subscribers.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::Serialize;
use tokio::sync::broadcast;

use atelier_core::job_model::{ArtifactRef, CaptureId, GenerationParams, JobId, JobState, RenderJob};

const CHANNEL_CAPACITY: usize = 64;

/// Public view of a job, as returned by `GET /api/v1/jobs/{id}` and carried
/// by `state` events.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct JobStatus {
    pub id: JobId,
    pub capture_id: CaptureId,
    pub state: JobState,
    pub progress: f64,
    pub result_count: usize,
    pub results: Vec<String>,
    pub error: Option<String>,
    pub parent_job: Option<JobId>,
    pub resolved_seed: Option<i64>,
    pub revision: u64,
    pub created_at: String,
    pub updated_at: String,
    pub params: GenerationParams,
}

impl JobStatus {
    pub fn new(job: &RenderJob, revision: u64) -> Self {
        let results = job
            .result_refs
            .iter()
            .filter_map(|r| match r {
                ArtifactRef::Result { job, index } => Some(format!("/api/v1/jobs/{job}/results/{index}")),
                _ => None,
            })
            .collect();
        Self {
            id: job.id,
            capture_id: job.capture_id,
            state: job.state,
            progress: job.progress,
            result_count: job.result_refs.len(),
            results,
            error: job.error.clone(),
            parent_job: job.parent_job,
            resolved_seed: job.resolved_seed,
            revision,
            created_at: job.created_at.to_rfc3339(),
            updated_at: job.updated_at.to_rfc3339(),
            params: job.params.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Notice {
    State(Box<JobStatus>),
    Progress { revision: u64, progress: f64 },
}

impl Notice {
    pub fn revision(&self) -> u64 {
        match self {
            Notice::State(s) => s.revision,
            Notice::Progress { revision, .. } => *revision,
        }
    }
}

#[derive(Default)]
pub struct EventHub {
    channels: Mutex<HashMap<JobId, broadcast::Sender<Notice>>>,
}

impl EventHub {
    pub fn subscribe(&self, job: JobId) -> broadcast::Receiver<Notice> {
        let mut map = self.channels.lock().unwrap();
        map.entry(job)
            .or_insert_with(|| broadcast::channel(CHANNEL_CAPACITY).0)
            .subscribe()
    }

    /// Delivers a notice. After a terminal state the channel is dropped;
    /// subscribers still drain what was sent.
    pub fn publish(&self, job: JobId, notice: Notice) {
        let mut map = self.channels.lock().unwrap();
        let terminal = matches!(&notice, Notice::State(s) if s.state.is_terminal());
        if let Some(tx) = map.get(&job) {
            let _ = tx.send(notice);
        }
        if terminal {
            map.remove(&job);
        }
    }

    /// Drops the channel of a job nobody listens to any more.
    pub fn release(&self, job: JobId) {
        let mut map = self.channels.lock().unwrap();
        if map.get(&job).is_some_and(|tx| tx.receiver_count() == 0) {
            map.remove(&job);
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channels.lock().unwrap().len()
    }
}
