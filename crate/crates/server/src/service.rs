//! Job execution: the queue, workers, and the single-flight backend.
//!
//! All job state lives in the store. Every change goes through
//! [`Service::apply`], which loads the job, runs the lifecycle transition and
//! writes it back with compare-and-set, retrying on conflict. Whoever loses
//! a race (say a cancel against a completion) sees an invalid transition
//! instead of clobbering the winner.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio_util::sync::CancellationToken;

use atelier_core::backend::{Backend, BackendRequest, ControlImage};
use atelier_core::control_maps::{canny_edges, normalize_depth, CannySettings, DepthSettings};
use atelier_core::job_model::{
    format_prompt_with_styles, transition, ControlKind, GenerationMode, JobError, JobEvent, JobId, JobState,
    RenderJob,
};
use atelier_core::raster::{resize_bilinear, resize_gray, to_grayscale, GrayImage, RasterImage};
use atelier_core::store::{ProjectStore, StoreError};

use crate::events::{EventHub, JobStatus, Notice};

/// Runtime knobs of the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Tasks draining the job queue. Backend calls are serialized
    /// regardless; extra workers overlap preprocessing only.
    pub workers: usize,
    pub canny: CannySettings,
    pub depth: DepthSettings,
    /// Minimum spacing of persisted progress updates.
    pub progress_interval: Duration,
    /// Allowed browser origins; `"*"` allows any, empty disables CORS.
    pub cors_origins: Vec<String>,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            canny: CannySettings::default(),
            depth: DepthSettings::default(),
            progress_interval: Duration::from_millis(250),
            cors_origins: vec!["http://localhost:5173".into()],
            max_upload_bytes: 64 * 1024 * 1024,
        }
    }
}

#[derive(Debug)]
pub enum ApplyError {
    Store(StoreError),
    Job(JobError),
}

impl From<StoreError> for ApplyError {
    fn from(e: StoreError) -> Self {
        ApplyError::Store(e)
    }
}

impl std::fmt::Display for ApplyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApplyError::Store(e) => e.fmt(f),
            ApplyError::Job(e) => e.fmt(f),
        }
    }
}

pub(crate) struct Inner {
    pub store: ProjectStore,
    pub backend: Arc<dyn Backend>,
    pub config: ServiceConfig,
    pub events: EventHub,
    backend_lock: tokio::sync::Mutex<()>,
    running: Mutex<HashMap<JobId, CancellationToken>>,
    queue: mpsc::UnboundedSender<JobId>,
    shutdown: CancellationToken,
}

#[derive(Clone)]
pub struct Service {
    pub(crate) inner: Arc<Inner>,
}

impl Service {
    /// Recovers interrupted jobs and starts the workers. Must run inside a
    /// tokio runtime.
    pub fn start(store: ProjectStore, backend: Arc<dyn Backend>, config: ServiceConfig) -> Result<Self, StoreError> {
        let (tx, rx) = mpsc::unbounded_channel();
        let workers = config.workers.max(1);
        let service = Service {
            inner: Arc::new(Inner {
                store,
                backend,
                config,
                events: EventHub::default(),
                backend_lock: tokio::sync::Mutex::new(()),
                running: Mutex::new(HashMap::new()),
                queue: tx,
                shutdown: CancellationToken::new(),
            }),
        };
        service.recover()?;
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..workers {
            let service = service.clone();
            let rx = rx.clone();
            tokio::spawn(async move { service.worker(rx).await });
        }
        Ok(service)
    }

    pub fn store(&self) -> &ProjectStore {
        &self.inner.store
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub(crate) fn events(&self) -> &EventHub {
        &self.inner.events
    }

    /// Jobs with a live event channel; zero when nobody is listening.
    pub fn events_channel_count(&self) -> usize {
        self.inner.events.channel_count()
    }

    /// Stops the workers and cancels running generations.
    pub fn shutdown(&self) {
        self.inner.shutdown.cancel();
    }

    /// Queued jobs go back on the queue; jobs caught mid-flight by a
    /// restart are failed since their backend call is gone.
    fn recover(&self) -> Result<(), StoreError> {
        for v in self.inner.store.list_jobs()? {
            match v.job.state {
                JobState::Queued => self.enqueue(v.job.id),
                s if !s.is_terminal() => {
                    if let Err(e) = self.apply(v.job.id, JobEvent::Fail("interrupted by service restart".into())) {
                        tracing::warn!(job = %v.job.id, error = %e, "could not fail interrupted job");
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn enqueue(&self, id: JobId) {
        let _ = self.inner.queue.send(id);
    }

    /// Persists a freshly created job and queues it.
    pub fn submit(&self, job: &RenderJob) -> Result<(), StoreError> {
        self.inner.store.save_job(job, 0)?;
        self.enqueue(job.id);
        Ok(())
    }

    /// Applies one lifecycle event with compare-and-set, publishing the
    /// outcome to subscribers.
    pub fn apply(&self, id: JobId, event: JobEvent) -> Result<RenderJob, ApplyError> {
        let store = &self.inner.store;
        loop {
            let current = store.load_job(id)?;
            let next = transition(&current.job, event.clone()).map_err(ApplyError::Job)?;
            match store.save_job(&next, current.revision) {
                Ok(revision) => {
                    let notice = match event {
                        JobEvent::Progress(_) if next.progress > current.job.progress => Some(Notice::Progress {
                            revision,
                            progress: next.progress,
                        }),
                        JobEvent::Progress(_) => None,
                        _ => Some(Notice::State(Box::new(JobStatus::new(&next, revision)))),
                    };
                    if let Some(n) = notice {
                        self.inner.events.publish(id, n);
                    }
                    return Ok(next);
                }
                Err(StoreError::RevisionConflict { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Cancels a job. A running generation is interrupted.
    pub fn cancel(&self, id: JobId) -> Result<RenderJob, ApplyError> {
        let job = self.apply(id, JobEvent::Cancel)?;
        if let Some(token) = self.inner.running.lock().unwrap().get(&id) {
            token.cancel();
        }
        Ok(job)
    }

    async fn worker(&self, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<JobId>>>) {
        loop {
            let next = {
                let mut rx = rx.lock().await;
                // Shutdown wins over queued work, or a stopped service
                // could still claim a job its successor has recovered.
                tokio::select! {
                    biased;
                    _ = self.inner.shutdown.cancelled() => None,
                    id = rx.recv() => id,
                }
            };
            let Some(id) = next else { return };
            if self.inner.shutdown.is_cancelled() {
                return;
            }
            self.run_job(id).await;
        }
    }

    async fn run_job(&self, id: JobId) {
        let token = self.inner.shutdown.child_token();
        self.inner.running.lock().unwrap().insert(id, token.clone());
        let outcome = self.execute(id, &token).await;
        self.inner.running.lock().unwrap().remove(&id);
        match outcome {
            Ok(()) | Err(Halt::Superseded) => {}
            Err(Halt::Failed(msg)) => {
                tracing::warn!(job = %id, error = %msg, "job failed");
                // Losing this race to a cancel is fine.
                let _ = self.apply(id, JobEvent::Fail(msg));
            }
        }
    }

    async fn execute(&self, id: JobId, token: &CancellationToken) -> Result<(), Halt> {
        if token.is_cancelled() {
            return Err(Halt::Superseded);
        }
        let job = self.step(id, JobEvent::StartPreprocess)?;
        let store = &self.inner.store;
        // Preprocessing and PNG encoding are CPU-bound.
        let svc = self.clone();
        let prepared = job.clone();
        let request = tokio::task::spawn_blocking(move || {
            prepare_request(&svc.inner.store, &svc.inner.config, &prepared)
        })
        .await
        .map_err(|e| Halt::Failed(e.to_string()))?
        .map_err(Halt::Failed)?;
        let seed = match job.params.seed {
            -1 => rand::thread_rng().gen_range(0..=i64::from(u32::MAX)),
            s => s,
        };
        let request = BackendRequest { seed, ..request };
        if token.is_cancelled() {
            return Err(Halt::Superseded);
        }
        self.step(id, JobEvent::Dispatch { seed })?;

        let _flight = tokio::select! {
            biased;
            _ = token.cancelled() => return Err(Halt::Superseded),
            guard = self.inner.backend_lock.lock() => guard,
        };
        self.step(id, JobEvent::SamplingStarted)?;

        let (tx, rx) = watch::channel(0.0f64);
        let monitor = tokio::spawn(progress_monitor(self.clone(), id, rx, self.inner.config.progress_interval));
        let sink = move |p: f64| {
            tx.send_if_modified(|cur| {
                let changed = p > *cur;
                if changed {
                    *cur = p;
                }
                changed
            });
        };
        let result = tokio::select! {
            r = self.inner.backend.generate(&request, &sink) => r,
            _ = token.cancelled() => {
                monitor.abort();
                return Err(Halt::Superseded);
            }
        };
        drop(sink);
        monitor.abort();
        let result = result.map_err(|e| Halt::Failed(e.to_string()))?;
        if token.is_cancelled() {
            return Err(Halt::Superseded);
        }

        let svc = self.clone();
        let refs = tokio::task::spawn_blocking(move || {
            result
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| svc.inner.store.put_result(id, i as u32, img))
                .collect::<Result<Vec<_>, _>>()
        })
        .await
        .map_err(|e| Halt::Failed(e.to_string()))?;
        let refs = match refs {
            Ok(r) => r,
            Err(e) => {
                let _ = store.delete_results(id);
                return Err(Halt::Failed(format!("storing results: {e}")));
            }
        };
        if let Err(e) = self.apply(id, JobEvent::Complete(refs)) {
            // Canceled while results were being written.
            let _ = store.delete_results(id);
            return match e {
                ApplyError::Job(_) => Err(Halt::Superseded),
                ApplyError::Store(e) => Err(Halt::Failed(e.to_string())),
            };
        }
        Ok(())
    }

    fn step(&self, id: JobId, event: JobEvent) -> Result<RenderJob, Halt> {
        self.apply(id, event).map_err(|e| match e {
            ApplyError::Job(_) => Halt::Superseded,
            ApplyError::Store(e) => Halt::Failed(e.to_string()),
        })
    }
}

enum Halt {
    /// The job left our hands (canceled, or failed elsewhere).
    Superseded,
    Failed(String),
}

async fn progress_monitor(service: Service, id: JobId, mut rx: watch::Receiver<f64>, interval: Duration) {
    while rx.changed().await.is_ok() {
        let p = *rx.borrow_and_update();
        if service.apply(id, JobEvent::Progress(p)).is_err() {
            return;
        }
        tokio::time::sleep(interval).await;
    }
}

/// Resolves a job's inputs into a backend request. The seed is left for the
/// caller to resolve.
pub fn prepare_request(store: &ProjectStore, config: &ServiceConfig, job: &RenderJob) -> Result<BackendRequest, String> {
    let p = &job.params;
    let (w, h) = (p.width, p.height);
    let capture = store.get_capture(job.capture_id).map_err(|e| e.to_string())?;
    let fit_rgba = |img: &RasterImage| resize_bilinear(&img.to_rgba8(), w, h).map_err(|e| e.to_string());
    let fit_gray = |img: GrayImage| resize_gray(&img, w, h).map_err(|e| e.to_string());
    let base = fit_rgba(&capture.image)?;

    let mut control_images = Vec::new();
    for unit in &p.control_units {
        let image = match &unit.image_ref {
            Some(r) => fit_gray(store.load_gray(r).map_err(|e| e.to_string())?)?,
            None => match unit.kind {
                ControlKind::Edge => {
                    let gray = to_grayscale(&base).map_err(|e| e.to_string())?;
                    canny_edges(&gray, &config.canny).map_err(|e| e.to_string())?
                }
                ControlKind::Depth => {
                    let depth = capture.depth.as_ref().ok_or("depth control requested but the capture has no depth")?;
                    fit_gray(normalize_depth(depth, config.depth.clip_percentile).map_err(|e| e.to_string())?)?
                }
            },
        };
        store.put_control(job.id, unit.kind, &image).map_err(|e| e.to_string())?;
        control_images.push(ControlImage {
            kind: unit.kind,
            image,
            weight: unit.weight,
            guidance_start: unit.guidance_start,
            guidance_end: unit.guidance_end,
        });
    }

    let init_image = match (p.mode, &p.init_ref) {
        (GenerationMode::TextToImage, _) => None,
        (_, Some(r)) => Some(fit_rgba(&store.load_image(r).map_err(|e| e.to_string())?)?),
        (_, None) => Some(base),
    };
    let mask_alpha = match (p.mode, &p.mask_ref) {
        (GenerationMode::Inpaint, Some(r)) => Some(fit_gray(store.load_gray(r).map_err(|e| e.to_string())?)?),
        (GenerationMode::Inpaint, None) => return Err("inpaint job has no mask".into()),
        _ => None,
    };
    let registry = store.load_style_registry().map_err(|e| e.to_string())?;
    let final_prompt = format_prompt_with_styles(&p.prompt, &p.styles, &registry).map_err(|e| e.to_string())?;

    Ok(BackendRequest {
        final_prompt,
        negative_prompt: p.negative_prompt.clone(),
        seed: p.seed,
        steps: p.steps,
        cfg_scale: p.cfg_scale,
        sampler: p.sampler,
        width: w,
        height: h,
        mode: p.mode,
        batch_size: p.batch_size,
        init_image,
        mask_alpha,
        denoising_strength: p.denoising_strength,
        control_images,
    })
}
