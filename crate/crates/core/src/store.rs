//! Plain-directory project persistence.
//!
//! ```text
//! <root>/captures/<id>.png          color upload, original bytes
//! <root>/captures/<id>.depth.png    16-bit depth upload, original bytes
//! <root>/captures/<id>.meta.json
//! <root>/jobs/<id>.json             {"v":1,"revision":N,"job":{...}}
//! <root>/results/<job>/<n>.png
//! <root>/masks/<job>.png            binary mask as submitted
//! <root>/masks/<job>.alpha.png      feathered alpha the backend composites with
//! <root>/controls/<job>/<kind>.png
//! <root>/styles.json                {"v":1,"styles":[...]}, user-edited
//! ```
//!
//! Every write goes to a temporary sibling and is renamed into place, so a
//! reader sees either the old or the new file. Job files carry a revision
//! for compare-and-set. One process per root; sharing a root between
//! processes is unsupported.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::control_maps::{ControlError, DepthBuffer};
use crate::job_model::{
    ArtifactRef, CaptureId, ControlKind, JobError, JobId, JobState, RenderJob, StyleEntry,
    StyleRegistry,
};
use crate::raster::{
    decode_gray_png, decode_png, encode_gray_png, encode_png, Channels, GrayImage, RasterError,
    RasterImage,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed png: {0}")]
    MalformedPng(RasterError),
    #[error("depth is {actual:?}, color is {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("depth upload requires near and far")]
    MissingDepthMeta,
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("unknown capture {0}")]
    UnknownCapture(CaptureId),
    #[error("revision conflict: expected {expected}, stored {actual}")]
    RevisionConflict { expected: u64, actual: u64 },
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("malformed style registry: {0}")]
    MalformedRegistry(String),
    #[error("duplicate style {0:?}")]
    DuplicateStyle(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Near/far planes that map the 16-bit depth range onto metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMeta {
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub v: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMeta>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug)]
pub struct StoredCapture {
    pub id: CaptureId,
    pub meta: CaptureMeta,
    /// Color upload exactly as received.
    pub color_png: Vec<u8>,
    pub image: RasterImage,
    pub depth: Option<DepthBuffer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VersionedJob {
    pub job: RenderJob,
    pub revision: u64,
}

#[derive(Serialize, Deserialize)]
struct JobFile {
    v: u32,
    revision: u64,
    job: RenderJob,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StylesFile {
    Versioned { v: u32, styles: Vec<StyleEntry> },
    Bare(Vec<StyleEntry>),
}

/// Where an injected fault fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultPoint {
    /// The temporary file is written and synced but never renamed.
    BeforeRename,
}

pub struct ProjectStore {
    root: PathBuf,
    // Serializes job read-check-write so CAS holds within the process.
    job_lock: Mutex<()>,
    fault: Mutex<Option<FaultPoint>>,
}

impl ProjectStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["captures", "jobs", "results", "masks", "controls"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Self {
            root,
            job_lock: Mutex::new(()),
            fault: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Arms a one-shot fault for the next atomic write.
    pub fn inject_fault(&self, point: FaultPoint) {
        *self.fault.lock().unwrap() = Some(point);
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("store paths have a parent");
        fs::create_dir_all(dir)?;
        let name = path.file_name().unwrap().to_string_lossy();
        let tmp = dir.join(format!(".{name}.{}.tmp", Uuid::new_v4().simple()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        if self.fault.lock().unwrap().take() == Some(FaultPoint::BeforeRename) {
            return Err(io::Error::other("injected fault before rename").into());
        }
        if let Err(e) = fs::rename(&tmp, path) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(())
    }

    fn read(&self, path: &Path, what: impl FnOnce() -> String) -> Result<Vec<u8>, StoreError> {
        fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(what()),
            _ => e.into(),
        })
    }

    // ---- captures ----

    fn capture_path(&self, id: CaptureId, suffix: &str) -> PathBuf {
        self.root.join("captures").join(format!("{id}{suffix}"))
    }

    /// Stores a color capture with optional 16-bit depth. `depth_meta` is
    /// required when depth is given and ignored otherwise.
    pub fn put_capture(
        &self,
        color: &[u8],
        depth: Option<&[u8]>,
        depth_meta: Option<DepthMeta>,
    ) -> Result<CaptureId, StoreError> {
        let image = decode_png(color).map_err(StoreError::MalformedPng)?;
        let dims = (image.width(), image.height());
        let meta_depth = match depth {
            None => None,
            Some(bytes) => {
                let raw = decode_png(bytes).map_err(StoreError::MalformedPng)?;
                let actual = (raw.width(), raw.height());
                if actual != dims {
                    return Err(StoreError::DimensionMismatch {
                        expected: dims,
                        actual,
                    });
                }
                let meta = depth_meta.ok_or(StoreError::MissingDepthMeta)?;
                decode_depth(&raw, meta)?;
                Some(meta)
            }
        };
        let id = CaptureId::new();
        let meta = CaptureMeta {
            v: SCHEMA_VERSION,
            width: dims.0,
            height: dims.1,
            depth: meta_depth,
            created_at: Utc::now(),
        };
        // Payloads first, metadata last: a capture exists once its meta does.
        self.write_atomic(&self.capture_path(id, ".png"), color)?;
        if let Some(bytes) = depth {
            self.write_atomic(&self.capture_path(id, ".depth.png"), bytes)?;
        }
        self.write_atomic(
            &self.capture_path(id, ".meta.json"),
            &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
        )?;
        Ok(id)
    }

    pub fn capture_meta(&self, id: CaptureId) -> Result<CaptureMeta, StoreError> {
        let path = self.capture_path(id, ".meta.json");
        let bytes = self.read(&path, || format!("capture {id}"))?;
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e))
    }

    pub fn capture_exists(&self, id: CaptureId) -> bool {
        self.capture_path(id, ".meta.json").is_file()
    }

    pub fn capture_png(&self, id: CaptureId) -> Result<Vec<u8>, StoreError> {
        self.capture_meta(id)?;
        self.read(&self.capture_path(id, ".png"), || format!("capture {id}"))
    }

    pub fn get_capture(&self, id: CaptureId) -> Result<StoredCapture, StoreError> {
        let meta = self.capture_meta(id)?;
        let color_png = self.capture_png(id)?;
        let image = decode_png(&color_png).map_err(|e| corrupt(&self.capture_path(id, ".png"), e))?;
        let depth = match meta.depth {
            None => None,
            Some(dm) => {
                let path = self.capture_path(id, ".depth.png");
                let bytes = self.read(&path, || format!("depth for capture {id}"))?;
                let raw = decode_png(&bytes).map_err(|e| corrupt(&path, e))?;
                Some(decode_depth(&raw, dm)?)
            }
        };
        Ok(StoredCapture {
            id,
            meta,
            color_png,
            image,
            depth,
        })
    }

    // ---- jobs ----

    fn job_path(&self, id: JobId) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    fn read_job_file(&self, path: &Path) -> Result<Option<VersionedJob>, StoreError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let file: JobFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e))?;
        if file.v != SCHEMA_VERSION {
            return Err(corrupt(path, format!("unsupported schema version {}", file.v)));
        }
        Ok(Some(VersionedJob {
            job: file.job,
            revision: file.revision,
        }))
    }

    /// Compare-and-set write. `expected_revision` is the revision the caller
    /// last read (0 for a job that has never been saved); returns the new
    /// revision.
    pub fn save_job(&self, job: &RenderJob, expected_revision: u64) -> Result<u64, StoreError> {
        if !self.capture_exists(job.capture_id) {
            return Err(StoreError::UnknownCapture(job.capture_id));
        }
        let _guard = self.job_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.job_path(job.id);
        let actual = self.read_job_file(&path)?.map_or(0, |v| v.revision);
        if actual != expected_revision {
            return Err(StoreError::RevisionConflict {
                expected: expected_revision,
                actual,
            });
        }
        let file = JobFile {
            v: SCHEMA_VERSION,
            revision: actual + 1,
            job: job.clone(),
        };
        self.write_atomic(&path, &serde_json::to_vec_pretty(&file).expect("job serializes"))?;
        Ok(actual + 1)
    }

    pub fn load_job(&self, id: JobId) -> Result<VersionedJob, StoreError> {
        self.read_job_file(&self.job_path(id))?
            .ok_or_else(|| StoreError::NotFound(format!("job {id}")))
    }

    /// All jobs, oldest first.
    pub fn list_jobs(&self) -> Result<Vec<VersionedJob>, StoreError> {
        let mut jobs = Vec::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if name.starts_with('.') || !name.ends_with(".json") {
                continue;
            }
            // A job removed between listing and reading is simply skipped.
            if let Some(job) = self.read_job_file(&path)? {
                jobs.push(job);
            }
        }
        jobs.sort_by_key(|v| (v.job.created_at, v.job.id));
        Ok(jobs)
    }

    pub fn list_jobs_by_state(&self, state: JobState) -> Result<Vec<VersionedJob>, StoreError> {
        let mut jobs = self.list_jobs()?;
        jobs.retain(|j| j.job.state == state);
        Ok(jobs)
    }

    // ---- artifacts ----

    fn result_path(&self, job: JobId, index: u32) -> PathBuf {
        self.root.join("results").join(job.to_string()).join(format!("{index}.png"))
    }

    fn mask_path(&self, job: JobId, suffix: &str) -> PathBuf {
        self.root.join("masks").join(format!("{job}{suffix}"))
    }

    fn control_path(&self, job: JobId, kind: ControlKind) -> PathBuf {
        self.root
            .join("controls")
            .join(job.to_string())
            .join(format!("{}.png", kind.as_str()))
    }

    pub fn put_result(&self, job: JobId, index: u32, image: &RasterImage) -> Result<ArtifactRef, StoreError> {
        self.write_atomic(&self.result_path(job, index), &encode_png(image))?;
        Ok(ArtifactRef::Result { job, index })
    }

    pub fn result_png(&self, job: JobId, index: u32) -> Result<Vec<u8>, StoreError> {
        self.read(&self.result_path(job, index), || format!("result {job}/{index}"))
    }

    /// Removes every stored result of a job.
    pub fn delete_results(&self, job: JobId) -> Result<(), StoreError> {
        match fs::remove_dir_all(self.root.join("results").join(job.to_string())) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    pub fn result_count_on_disk(&self, job: JobId) -> usize {
        fs::read_dir(self.root.join("results").join(job.to_string()))
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| {
                        let n = e.file_name();
                        let n = n.to_string_lossy();
                        !n.starts_with('.') && n.ends_with(".png")
                    })
                    .count()
            })
            .unwrap_or(0)
    }

    /// Stores the submitted binary mask and the feathered alpha derived from
    /// it.
    pub fn put_mask(&self, job: JobId, mask: &GrayImage, alpha: &GrayImage) -> Result<ArtifactRef, StoreError> {
        self.write_atomic(&self.mask_path(job, ".png"), &encode_gray_png(mask))?;
        self.write_atomic(&self.mask_path(job, ".alpha.png"), &encode_gray_png(alpha))?;
        Ok(ArtifactRef::Mask(job))
    }

    pub fn mask_png(&self, job: JobId) -> Result<Vec<u8>, StoreError> {
        self.read(&self.mask_path(job, ".png"), || format!("mask for {job}"))
    }

    pub fn put_control(&self, job: JobId, kind: ControlKind, map: &GrayImage) -> Result<ArtifactRef, StoreError> {
        self.write_atomic(&self.control_path(job, kind), &encode_gray_png(map))?;
        Ok(ArtifactRef::Control { job, kind })
    }

    pub fn control_png(&self, job: JobId, kind: ControlKind) -> Result<Vec<u8>, StoreError> {
        self.read(&self.control_path(job, kind), || {
            format!("{} control for {job}", kind.as_str())
        })
    }

    /// Raw PNG bytes behind a reference. A mask reference yields the
    /// feathered alpha.
    pub fn artifact_png(&self, r: &ArtifactRef) -> Result<Vec<u8>, StoreError> {
        match r {
            ArtifactRef::Capture(id) => self.capture_png(*id),
            ArtifactRef::Result { job, index } => self.result_png(*job, *index),
            ArtifactRef::Mask(job) => self.read(&self.mask_path(*job, ".alpha.png"), || r.to_string()),
            ArtifactRef::Control { job, kind } => self.control_png(*job, *kind),
        }
    }

    pub fn load_image(&self, r: &ArtifactRef) -> Result<RasterImage, StoreError> {
        let bytes = self.artifact_png(r)?;
        decode_png(&bytes).map_err(|e| StoreError::Corrupt {
            path: PathBuf::from(r.to_string()),
            message: e.to_string(),
        })
    }

    pub fn load_gray(&self, r: &ArtifactRef) -> Result<GrayImage, StoreError> {
        let bytes = self.artifact_png(r)?;
        decode_gray_png(&bytes).map_err(|e| StoreError::Corrupt {
            path: PathBuf::from(r.to_string()),
            message: e.to_string(),
        })
    }

    // ---- styles ----

    pub fn styles_path(&self) -> PathBuf {
        self.root.join("styles.json")
    }

    /// Reads `styles.json`; a missing file is an empty registry. A bare
    /// array is accepted as well as the versioned object.
    pub fn load_style_registry(&self) -> Result<StyleRegistry, StoreError> {
        let bytes = match fs::read(self.styles_path()) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(StyleRegistry::default()),
            Err(e) => return Err(e.into()),
        };
        let entries = match serde_json::from_slice::<StylesFile>(&bytes) {
            Ok(StylesFile::Bare(entries)) => entries,
            Ok(StylesFile::Versioned { v, styles }) if v == SCHEMA_VERSION => styles,
            Ok(StylesFile::Versioned { v, .. }) => {
                return Err(StoreError::MalformedRegistry(format!("unsupported version {v}")))
            }
            Err(e) => return Err(StoreError::MalformedRegistry(e.to_string())),
        };
        if let Some(e) = entries.iter().find(|e| !e.default_weight.is_finite()) {
            return Err(StoreError::MalformedRegistry(format!(
                "style {:?} has a non-finite default weight",
                e.name
            )));
        }
        StyleRegistry::new(entries).map_err(|e| match e {
            JobError::DuplicateStyle(name) => StoreError::DuplicateStyle(name),
            other => StoreError::MalformedRegistry(other.to_string()),
        })
    }

    pub fn save_style_registry(&self, registry: &StyleRegistry) -> Result<(), StoreError> {
        let body = serde_json::json!({ "v": SCHEMA_VERSION, "styles": registry.entries() });
        self.write_atomic(&self.styles_path(), &serde_json::to_vec_pretty(&body).expect("styles serialize"))
    }
}

fn decode_depth(raw: &RasterImage, meta: DepthMeta) -> Result<DepthBuffer, StoreError> {
    if raw.channels() != Channels::Gray16 {
        return Err(StoreError::InvalidDepth(format!(
            "depth must be 16-bit grayscale, got {:?}",
            raw.channels()
        )));
    }
    DepthBuffer::from_png16(raw, meta.near, meta.far).map_err(|e| match e {
        ControlError::InvalidDepth(m) => StoreError::InvalidDepth(m),
        other => StoreError::InvalidDepth(other.to_string()),
    })
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
