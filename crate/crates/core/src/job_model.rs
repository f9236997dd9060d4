//! Render jobs: generation parameters and their validation, LoRA style
//! tokens, and the job lifecycle.
//!
//! A job moves `Queued -> Preprocessing -> Dispatched -> Sampling ->
//! Completed`. `Fail` and `Cancel` are accepted from any non-terminal state;
//! terminal states accept nothing. Progress only moves forward and reaches
//! 1 exactly when the job completes.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::control_maps::MaskSpec;

pub const DEFAULT_STEPS: u32 = 20;
pub const DEFAULT_CFG_SCALE: f64 = 7.0;
pub const DEFAULT_SAMPLER: Sampler = Sampler::EulerA;
pub const DEFAULT_DENOISING_STRENGTH: f64 = 0.75;
pub const DEFAULT_BATCH_SIZE: u32 = 1;
pub const DEFAULT_DIMENSION: u32 = 512;

/// Highest progress a job can report before it completes.
pub const SAMPLING_PROGRESS_CEILING: f64 = 0.99;

macro_rules! uuid_id {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Uuid);

        impl $name {
            pub fn new() -> Self {
                Self(Uuid::new_v4())
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl FromStr for $name {
            type Err = uuid::Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Uuid::parse_str(s).map(Self)
            }
        }
    };
}

uuid_id!(JobId);
uuid_id!(CaptureId);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Edge,
    Depth,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Edge => "edge",
            ControlKind::Depth => "depth",
        }
    }
}

impl FromStr for ControlKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edge" => Ok(ControlKind::Edge),
            "depth" => Ok(ControlKind::Depth),
            other => Err(format!("unknown control kind {other:?}")),
        }
    }
}

/// A stored image the job reads or writes. Serialized as a short string:
/// `capture:<id>`, `result:<job>/<n>`, `mask:<job>`, `control:<job>/<kind>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ArtifactRef {
    Capture(CaptureId),
    Result { job: JobId, index: u32 },
    Mask(JobId),
    Control { job: JobId, kind: ControlKind },
}

impl fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArtifactRef::Capture(id) => write!(f, "capture:{id}"),
            ArtifactRef::Result { job, index } => write!(f, "result:{job}/{index}"),
            ArtifactRef::Mask(job) => write!(f, "mask:{job}"),
            ArtifactRef::Control { job, kind } => write!(f, "control:{job}/{}", kind.as_str()),
        }
    }
}

impl FromStr for ArtifactRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed artifact reference {s:?}");
        let (scheme, rest) = s.split_once(':').ok_or_else(bad)?;
        match scheme {
            "capture" => Ok(ArtifactRef::Capture(rest.parse().map_err(|_| bad())?)),
            "mask" => Ok(ArtifactRef::Mask(rest.parse().map_err(|_| bad())?)),
            "result" => {
                let (job, index) = rest.split_once('/').ok_or_else(bad)?;
                Ok(ArtifactRef::Result {
                    job: job.parse().map_err(|_| bad())?,
                    index: index.parse().map_err(|_| bad())?,
                })
            }
            "control" => {
                let (job, kind) = rest.split_once('/').ok_or_else(bad)?;
                Ok(ArtifactRef::Control {
                    job: job.parse().map_err(|_| bad())?,
                    kind: kind.parse()?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for ArtifactRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArtifactRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    TextToImage,
    ImageToImage,
    Inpaint,
}

/// Sampler identifiers accepted by the API. The webui expects its own
/// display names on the wire, see [`Sampler::webui_name`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampler {
    #[serde(rename = "euler_a")]
    EulerA,
    #[serde(rename = "euler")]
    Euler,
    #[serde(rename = "heun")]
    Heun,
    #[serde(rename = "lms")]
    Lms,
    #[serde(rename = "dpm2")]
    Dpm2,
    #[serde(rename = "dpmpp_2m")]
    DpmPp2M,
    #[serde(rename = "dpmpp_sde")]
    DpmPpSde,
    #[serde(rename = "ddim")]
    Ddim,
}

impl Sampler {
    pub const ALL: [Sampler; 8] = [
        Sampler::EulerA,
        Sampler::Euler,
        Sampler::Heun,
        Sampler::Lms,
        Sampler::Dpm2,
        Sampler::DpmPp2M,
        Sampler::DpmPpSde,
        Sampler::Ddim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::EulerA => "euler_a",
            Sampler::Euler => "euler",
            Sampler::Heun => "heun",
            Sampler::Lms => "lms",
            Sampler::Dpm2 => "dpm2",
            Sampler::DpmPp2M => "dpmpp_2m",
            Sampler::DpmPpSde => "dpmpp_sde",
            Sampler::Ddim => "ddim",
        }
    }

    pub fn webui_name(self) -> &'static str {
        match self {
            Sampler::EulerA => "Euler a",
            Sampler::Euler => "Euler",
            Sampler::Heun => "Heun",
            Sampler::Lms => "LMS",
            Sampler::Dpm2 => "DPM2",
            Sampler::DpmPp2M => "DPM++ 2M",
            Sampler::DpmPpSde => "DPM++ SDE",
            Sampler::Ddim => "DDIM",
        }
    }
}

impl FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sampler::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown sampler {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlUnit {
    pub kind: ControlKind,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub guidance_start: f64,
    #[serde(default = "one")]
    pub guidance_end: f64,
    /// Filled in by preprocessing once the control image is stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ArtifactRef>,
}

fn one() -> f64 {
    1.0
}

impl ControlUnit {
    pub fn new(kind: ControlKind) -> Self {
        Self {
            kind,
            weight: 1.0,
            guidance_start: 0.0,
            guidance_end: 1.0,
            image_ref: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRef {
    pub name: String,
    pub weight: f64,
}

/// A style as requested by a client; the weight falls back to the
/// registry default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSelection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl From<StyleRef> for StyleSelection {
    fn from(s: StyleRef) -> Self {
        Self {
            name: s.name,
            weight: Some(s.weight),
        }
    }
}

/// A registered LoRA style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub name: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default = "one")]
    pub default_weight: f64,
    #[serde(default)]
    pub description: String,
}

/// Names usable inside a `<lora:NAME:WEIGHT>` token.
pub fn is_token_safe(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleRegistry {
    entries: Vec<StyleEntry>,
}

impl StyleRegistry {
    /// Rejects duplicate or non-token-safe names.
    pub fn new(entries: Vec<StyleEntry>) -> Result<Self, JobError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !is_token_safe(&e.name) {
                return Err(JobError::InvalidStyleName(e.name.clone()));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(JobError::DuplicateStyle(e.name.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&StyleEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[StyleEntry] {
        &self.entries
    }
}

/// Generation parameters as submitted. Absent fields take documented
/// defaults during validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationRequest {
    pub prompt: String,
    pub negative_prompt: Option<String>,
    pub seed: Option<i64>,
    pub steps: Option<i64>,
    pub cfg_scale: Option<f64>,
    pub sampler: Option<String>,
    pub width: Option<i64>,
    pub height: Option<i64>,
    pub mode: Option<GenerationMode>,
    pub denoising_strength: Option<f64>,
    pub control_units: Option<Vec<ControlUnit>>,
    pub styles: Option<Vec<StyleSelection>>,
    pub batch_size: Option<i64>,
    pub init_ref: Option<ArtifactRef>,
    pub mask_ref: Option<ArtifactRef>,
}

/// Validated generation parameters with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub prompt: String,
    pub negative_prompt: String,
    /// `-1` asks for a random seed at dispatch.
    pub seed: i64,
    pub steps: u32,
    pub cfg_scale: f64,
    pub sampler: Sampler,
    pub width: u32,
    pub height: u32,
    pub mode: GenerationMode,
    pub denoising_strength: f64,
    pub control_units: Vec<ControlUnit>,
    pub styles: Vec<StyleRef>,
    pub batch_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_ref: Option<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<ArtifactRef>,
}

impl From<GenerationParams> for GenerationRequest {
    fn from(p: GenerationParams) -> Self {
        Self {
            prompt: p.prompt,
            negative_prompt: Some(p.negative_prompt),
            seed: Some(p.seed),
            steps: Some(p.steps as i64),
            cfg_scale: Some(p.cfg_scale),
            sampler: Some(p.sampler.as_str().to_string()),
            width: Some(p.width as i64),
            height: Some(p.height as i64),
            mode: Some(p.mode),
            denoising_strength: Some(p.denoising_strength),
            control_units: Some(p.control_units),
            styles: Some(p.styles.into_iter().map(Into::into).collect()),
            batch_size: Some(p.batch_size as i64),
            init_ref: p.init_ref,
            mask_ref: p.mask_ref,
        }
    }
}

/// One validation failure, keyed by the offending field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Preprocessing,
    Dispatched,
    Sampling,
    Completed,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Queued,
        JobState::Preprocessing,
        JobState::Dispatched,
        JobState::Sampling,
        JobState::Completed,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::Failed | JobState::Canceled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Preprocessing => "preprocessing",
            JobState::Dispatched => "dispatched",
            JobState::Sampling => "sampling",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
            JobState::Canceled => "canceled",
        }
    }
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobEvent {
    StartPreprocess,
    /// Carries the concrete seed the backend will use.
    Dispatch { seed: i64 },
    SamplingStarted,
    Progress(f64),
    Complete(Vec<ArtifactRef>),
    Fail(String),
    Cancel,
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::StartPreprocess => "start_preprocess",
            JobEvent::Dispatch { .. } => "dispatch",
            JobEvent::SamplingStarted => "sampling_started",
            JobEvent::Progress(_) => "progress",
            JobEvent::Complete(_) => "complete",
            JobEvent::Fail(_) => "fail",
            JobEvent::Cancel => "cancel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderJob {
    pub id: JobId,
    pub capture_id: CaptureId,
    pub params: GenerationParams,
    pub state: JobState,
    pub progress: f64,
    #[serde(default)]
    pub result_refs: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_job: Option<JobId>,
    /// Seed actually used, recorded at dispatch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_seed: Option<i64>,
}

impl RenderJob {
    pub fn new(capture_id: CaptureId, params: GenerationParams) -> Self {
        let now = Utc::now();
        Self {
            id: JobId::new(),
            capture_id,
            params,
            state: JobState::Queued,
            progress: 0.0,
            result_refs: Vec::new(),
            error: None,
            created_at: now,
            updated_at: now,
            parent_job: None,
            resolved_seed: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JobError {
    #[error("validation failed: {}", summarize(.0))]
    ValidationFailed(Vec<FieldError>),
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
    #[error("style name {0:?} is not token-safe ([A-Za-z0-9_-]+)")]
    InvalidStyleName(String),
    #[error("duplicate style {0:?}")]
    DuplicateStyle(String),
    #[error("invalid transition: {event} in state {}", .state.as_str())]
    InvalidTransition { state: JobState, event: &'static str },
    #[error("parent job is {}, not completed", .0.as_str())]
    ParentNotCompleted(JobState),
    #[error("result index {index} out of range ({count} results)")]
    ResultOutOfRange { index: u32, count: usize },
    #[error("mask is {actual:?}, result is {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every field and reports all violations together; fills defaults
/// for absent fields.
pub fn validate_params(
    req: &GenerationRequest,
    registry: &StyleRegistry,
) -> Result<GenerationParams, JobError> {
    let mut errors = Vec::new();
    let mut err = |field: &str, msg: &str| errors.push(FieldError::new(field, msg));

    let seed = req.seed.unwrap_or(-1);
    if seed < -1 {
        err("seed", "seed must be -1 (random) or non-negative");
    }

    let steps = req.steps.unwrap_or(DEFAULT_STEPS as i64);
    if !(1..=150).contains(&steps) {
        err("steps", "steps out of range (1..=150)");
    }

    let cfg_scale = req.cfg_scale.unwrap_or(DEFAULT_CFG_SCALE);
    if !(1.0..=30.0).contains(&cfg_scale) {
        err("cfg_scale", "cfg_scale out of range (1.0..=30.0)");
    }

    let sampler = match req.sampler.as_deref() {
        None => DEFAULT_SAMPLER,
        Some(name) => name.parse().unwrap_or_else(|msg: String| {
            err("sampler", &msg);
            DEFAULT_SAMPLER
        }),
    };

    let mut dimension = |field: &str, value: Option<i64>| {
        let v = value.unwrap_or(DEFAULT_DIMENSION as i64);
        if !(64..=2048).contains(&v) {
            err(field, &format!("{field} out of range (64..=2048)"));
        } else if v % 8 != 0 {
            err(field, &format!("{field} must be multiple of 8"));
        }
        v
    };
    let width = dimension("width", req.width);
    let height = dimension("height", req.height);

    let mode = req.mode.unwrap_or(GenerationMode::TextToImage);
    let denoising_strength = req
        .denoising_strength
        .unwrap_or(DEFAULT_DENOISING_STRENGTH);
    if !(0.0..=1.0).contains(&denoising_strength) {
        err("denoising_strength", "denoising_strength out of range (0..=1)");
    }
    if mode != GenerationMode::TextToImage && req.init_ref.is_none() {
        err("init_ref", "image-to-image and inpaint modes require an init image");
    }
    if mode == GenerationMode::Inpaint && req.mask_ref.is_none() {
        err("mask_ref", "inpaint mode requires a mask");
    }

    let control_units = req.control_units.clone().unwrap_or_default();
    let mut kinds = HashSet::new();
    for (i, unit) in control_units.iter().enumerate() {
        let field = |name: &str| format!("control_units[{i}].{name}");
        if !(0.0..=2.0).contains(&unit.weight) {
            err(&field("weight"), "weight out of range (0..=2)");
        }
        if !(0.0..=1.0).contains(&unit.guidance_start) {
            err(&field("guidance_start"), "guidance_start out of range (0..=1)");
        }
        if !(0.0..=1.0).contains(&unit.guidance_end) {
            err(&field("guidance_end"), "guidance_end out of range (0..=1)");
        }
        if unit.guidance_start > unit.guidance_end {
            err(&field("guidance_start"), "guidance_start must not exceed guidance_end");
        }
        if !kinds.insert(unit.kind) {
            err(&field("kind"), "at most one control unit per kind");
        }
    }

    let mut styles = Vec::new();
    for (i, sel) in req.styles.iter().flatten().enumerate() {
        let Some(entry) = registry.get(&sel.name) else {
            err(&format!("styles[{i}].name"), &format!("unknown style {:?}", sel.name));
            continue;
        };
        let weight = sel.weight.unwrap_or(entry.default_weight);
        if !(0.0..=2.0).contains(&weight) {
            err(&format!("styles[{i}].weight"), "weight out of range (0..=2)");
        }
        styles.push(StyleRef {
            name: sel.name.clone(),
            weight,
        });
    }

    let batch_size = req.batch_size.unwrap_or(DEFAULT_BATCH_SIZE as i64);
    if !(1..=8).contains(&batch_size) {
        err("batch_size", "batch_size out of range (1..=8)");
    }

    if !errors.is_empty() {
        return Err(JobError::ValidationFailed(errors));
    }
    Ok(GenerationParams {
        prompt: req.prompt.clone(),
        negative_prompt: req.negative_prompt.clone().unwrap_or_default(),
        seed,
        steps: steps as u32,
        cfg_scale,
        sampler,
        width: width as u32,
        height: height as u32,
        mode,
        denoising_strength,
        control_units,
        styles,
        batch_size: batch_size as u32,
        init_ref: req.init_ref.clone(),
        mask_ref: req.mask_ref.clone(),
    })
}

/// Shortest decimal rendering, at most four fractional digits: 0.8, 1, 0.25.
fn format_weight(w: f64) -> String {
    let rounded = (w * 10_000.0).round() / 10_000.0;
    format!("{rounded}")
}

/// Appends one `<lora:NAME:WEIGHT>` token per style to the prompt.
pub fn format_prompt_with_styles(
    prompt: &str,
    styles: &[StyleRef],
    registry: &StyleRegistry,
) -> Result<String, JobError> {
    let mut out = prompt.to_string();
    for style in styles {
        if registry.get(&style.name).is_none() {
            return Err(JobError::UnknownStyle(style.name.clone()));
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&format!(
            "<lora:{}:{}>",
            style.name,
            format_weight(style.weight)
        ));
    }
    Ok(out)
}

/// Applies one lifecycle event, returning the next job version.
pub fn transition(job: &RenderJob, event: JobEvent) -> Result<RenderJob, JobError> {
    use JobState::*;

    let invalid = || JobError::InvalidTransition {
        state: job.state,
        event: event.name(),
    };
    if job.state.is_terminal() {
        return Err(invalid());
    }
    let mut next = job.clone();
    match (&event, job.state) {
        (JobEvent::StartPreprocess, Queued) => next.state = Preprocessing,
        (JobEvent::Dispatch { seed }, Preprocessing) => {
            next.state = Dispatched;
            next.resolved_seed = Some(*seed);
        }
        (JobEvent::SamplingStarted, Dispatched) => next.state = Sampling,
        (JobEvent::Progress(p), Sampling) => {
            if p.is_finite() {
                next.progress = job.progress.max(p.min(SAMPLING_PROGRESS_CEILING));
            }
        }
        (JobEvent::Complete(results), Sampling) => {
            next.state = Completed;
            next.progress = 1.0;
            next.result_refs = results.clone();
        }
        (JobEvent::Fail(msg), _) => {
            next.state = Failed;
            next.error = Some(msg.clone());
        }
        (JobEvent::Cancel, _) => next.state = Canceled,
        _ => return Err(invalid()),
    }
    next.updated_at = Utc::now().max(job.updated_at);
    Ok(next)
}

/// Parameters a local edit may change relative to its parent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintOverrides {
    pub negative_prompt: Option<String>,
    pub seed: Option<i64>,
    pub steps: Option<i64>,
    pub cfg_scale: Option<f64>,
    pub sampler: Option<String>,
    pub denoising_strength: Option<f64>,
    pub control_units: Option<Vec<ControlUnit>>,
    pub styles: Option<Vec<StyleSelection>>,
    pub batch_size: Option<i64>,
}

/// Builds a queued inpaint job that regenerates the masked part of one of
/// the parent's results. Unspecified parameters are inherited; the seed
/// defaults to the one the parent actually used.
pub fn derive_inpaint_job(
    parent: &RenderJob,
    result_index: u32,
    mask: &MaskSpec,
    new_prompt: &str,
    overrides: &InpaintOverrides,
    registry: &StyleRegistry,
) -> Result<RenderJob, JobError> {
    if parent.state != JobState::Completed {
        return Err(JobError::ParentNotCompleted(parent.state));
    }
    if result_index as usize >= parent.result_refs.len() {
        return Err(JobError::ResultOutOfRange {
            index: result_index,
            count: parent.result_refs.len(),
        });
    }
    let expected = (parent.params.width, parent.params.height);
    let actual = (mask.mask.width(), mask.mask.height());
    if expected != actual {
        return Err(JobError::DimensionMismatch { expected, actual });
    }

    let child_id = JobId::new();
    let mut req = GenerationRequest::from(parent.params.clone());
    req.prompt = new_prompt.to_string();
    req.mode = Some(GenerationMode::Inpaint);
    req.init_ref = Some(ArtifactRef::Result {
        job: parent.id,
        index: result_index,
    });
    req.mask_ref = Some(ArtifactRef::Mask(child_id));
    req.seed = overrides
        .seed
        .or(parent.resolved_seed)
        .or(Some(parent.params.seed));
    macro_rules! inherit {
        ($($field:ident),*) => {
            $(if let Some(v) = &overrides.$field {
                req.$field = Some(v.clone());
            })*
        };
    }
    inherit!(
        negative_prompt,
        steps,
        cfg_scale,
        sampler,
        denoising_strength,
        control_units,
        styles,
        batch_size
    );
    // Stored control images belong to the parent; the child rebuilds its own.
    if let Some(units) = req.control_units.as_mut() {
        for unit in units {
            unit.image_ref = None;
        }
    }

    let params = validate_params(&req, registry)?;
    let mut child = RenderJob::new(parent.capture_id, params);
    child.id = child_id;
    child.parent_job = Some(parent.id);
    Ok(child)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GrayImage;
    use proptest::prelude::*;

    fn registry() -> StyleRegistry {
        let entry = |name: &str, w: f64| StyleEntry {
            name: name.into(),
            display_name: name.to_uppercase(),
            default_weight: w,
            description: String::new(),
        };
        StyleRegistry::new(vec![entry("nordic", 0.8), entry("a", 1.0), entry("b", 0.5)]).unwrap()
    }

    fn field_errors(r: Result<GenerationParams, JobError>) -> Vec<FieldError> {
        match r {
            Err(JobError::ValidationFailed(e)) => e,
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    fn base_params() -> GenerationParams {
        validate_params(
            &GenerationRequest {
                prompt: "brick facade".into(),
                seed: Some(42),
                ..Default::default()
            },
            &registry(),
        )
        .unwrap()
    }

    #[test]
    fn defaults_are_filled() {
        let p = validate_params(&GenerationRequest::default(), &StyleRegistry::default()).unwrap();
        assert_eq!(p.steps, 20);
        assert_eq!(p.cfg_scale, 7.0);
        assert_eq!(p.sampler, Sampler::EulerA);
        assert_eq!(p.denoising_strength, 0.75);
        assert_eq!(p.batch_size, 1);
        assert_eq!(p.seed, -1);
        assert_eq!((p.width, p.height), (512, 512));
        assert_eq!(p.mode, GenerationMode::TextToImage);
    }

    #[test]
    fn zero_steps_rejected() {
        let req = GenerationRequest { steps: Some(0), ..Default::default() };
        let errors = field_errors(validate_params(&req, &registry()));
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].field, "steps");
        assert!(errors[0].message.contains("steps out of range"));
    }

    #[test]
    fn width_must_be_multiple_of_eight() {
        let req = GenerationRequest { width: Some(513), ..Default::default() };
        let errors = field_errors(validate_params(&req, &registry()));
        assert_eq!(errors[0].field, "width");
        assert_eq!(errors[0].message, "width must be multiple of 8");
    }

    #[test]
    fn all_violations_reported_together() {
        let req = GenerationRequest {
            steps: Some(151),
            cfg_scale: Some(0.5),
            sampler: Some("warp".into()),
            width: Some(32),
            height: Some(100),
            denoising_strength: Some(1.5),
            batch_size: Some(9),
            seed: Some(-7),
            mode: Some(GenerationMode::Inpaint),
            styles: Some(vec![StyleSelection { name: "ghost".into(), weight: None }]),
            control_units: Some(vec![
                ControlUnit { guidance_start: 0.8, guidance_end: 0.2, ..ControlUnit::new(ControlKind::Edge) },
                ControlUnit { weight: 3.0, ..ControlUnit::new(ControlKind::Edge) },
            ]),
            ..Default::default()
        };
        let fields: Vec<String> = field_errors(validate_params(&req, &registry()))
            .into_iter()
            .map(|e| e.field)
            .collect();
        for f in [
            "seed",
            "steps",
            "cfg_scale",
            "sampler",
            "width",
            "height",
            "denoising_strength",
            "init_ref",
            "mask_ref",
            "control_units[0].guidance_start",
            "control_units[1].weight",
            "control_units[1].kind",
            "styles[0].name",
            "batch_size",
        ] {
            assert!(fields.iter().any(|x| x == f), "missing {f} in {fields:?}");
        }
    }

    #[test]
    fn style_weight_defaults_from_registry() {
        let req = GenerationRequest {
            styles: Some(vec![StyleSelection { name: "nordic".into(), weight: None }]),
            ..Default::default()
        };
        let p = validate_params(&req, &registry()).unwrap();
        assert_eq!(p.styles, vec![StyleRef { name: "nordic".into(), weight: 0.8 }]);
    }

    #[test]
    fn prompt_style_tokens() {
        let reg = registry();
        assert_eq!(format_prompt_with_styles("brick facade", &[], &reg).unwrap(), "brick facade");
        assert_eq!(
            format_prompt_with_styles("brick facade", &[StyleRef { name: "nordic".into(), weight: 0.8 }], &reg).unwrap(),
            "brick facade <lora:nordic:0.8>"
        );
        assert_eq!(
            format_prompt_with_styles(
                "x",
                &[StyleRef { name: "a".into(), weight: 1.0 }, StyleRef { name: "b".into(), weight: 0.5 }],
                &reg
            )
            .unwrap(),
            "x <lora:a:1> <lora:b:0.5>"
        );
        assert_eq!(
            format_prompt_with_styles("x", &[StyleRef { name: "zzz".into(), weight: 1.0 }], &reg),
            Err(JobError::UnknownStyle("zzz".into()))
        );
    }

    #[test]
    fn registry_rejects_bad_names() {
        let e = |n: &str| StyleEntry {
            name: n.into(),
            display_name: String::new(),
            default_weight: 1.0,
            description: String::new(),
        };
        assert_eq!(
            StyleRegistry::new(vec![e("nordic"), e("nordic")]),
            Err(JobError::DuplicateStyle("nordic".into()))
        );
        assert_eq!(
            StyleRegistry::new(vec![e("bad name!")]),
            Err(JobError::InvalidStyleName("bad name!".into()))
        );
    }

    #[test]
    fn artifact_refs_round_trip_as_strings() {
        let job = JobId::new();
        for r in [
            ArtifactRef::Capture(CaptureId::new()),
            ArtifactRef::Result { job, index: 3 },
            ArtifactRef::Mask(job),
            ArtifactRef::Control { job, kind: ControlKind::Depth },
        ] {
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<ArtifactRef>(&json).unwrap(), r);
        }
        assert!("result:nope".parse::<ArtifactRef>().is_err());
        assert!("blob:x".parse::<ArtifactRef>().is_err());
    }

    fn job_in(state: JobState) -> RenderJob {
        let mut job = RenderJob::new(CaptureId::new(), base_params());
        job.state = state;
        job
    }

    #[test]
    fn lifecycle_edges() {
        let job = job_in(JobState::Queued);
        let job = transition(&job, JobEvent::StartPreprocess).unwrap();
        assert_eq!(job.state, JobState::Preprocessing);
        let job = transition(&job, JobEvent::Dispatch { seed: 9 }).unwrap();
        assert_eq!((job.state, job.resolved_seed), (JobState::Dispatched, Some(9)));
        let job = transition(&job, JobEvent::SamplingStarted).unwrap();
        let job = transition(&job, JobEvent::Progress(0.7)).unwrap();
        let job = transition(&job, JobEvent::Progress(0.5)).unwrap();
        assert_eq!(job.progress, 0.7);
        let job = transition(&job, JobEvent::Progress(1.0)).unwrap();
        assert!(job.progress < 1.0);
        let r = ArtifactRef::Result { job: job.id, index: 0 };
        let job = transition(&job, JobEvent::Complete(vec![r.clone()])).unwrap();
        assert_eq!((job.state, job.progress), (JobState::Completed, 1.0));
        assert_eq!(job.result_refs, vec![r]);
        assert_eq!(
            transition(&job, JobEvent::Cancel),
            Err(JobError::InvalidTransition { state: JobState::Completed, event: "cancel" })
        );
    }

    #[test]
    fn skipping_states_is_rejected() {
        assert!(transition(&job_in(JobState::Queued), JobEvent::SamplingStarted).is_err());
        assert!(transition(&job_in(JobState::Queued), JobEvent::Progress(0.1)).is_err());
        assert!(transition(&job_in(JobState::Dispatched), JobEvent::Complete(vec![])).is_err());
        let failed = transition(&job_in(JobState::Sampling), JobEvent::Fail("boom".into())).unwrap();
        assert_eq!(failed.error.as_deref(), Some("boom"));
        assert!(transition(&failed, JobEvent::Fail("again".into())).is_err());
    }

    fn completed_parent() -> RenderJob {
        let mut job = job_in(JobState::Completed);
        job.progress = 1.0;
        job.resolved_seed = Some(42);
        job.result_refs = vec![ArtifactRef::Result { job: job.id, index: 0 }];
        job
    }

    fn mask(w: u32, h: u32) -> MaskSpec {
        MaskSpec { mask: GrayImage::filled(w, h, 0).unwrap(), feather_radius: 2 }
    }

    #[test]
    fn inpaint_inherits_from_parent() {
        let parent = completed_parent();
        let child = derive_inpaint_job(&parent, 0, &mask(512, 512), "new roof", &InpaintOverrides::default(), &registry()).unwrap();
        assert_eq!(child.parent_job, Some(parent.id));
        assert_eq!(child.state, JobState::Queued);
        assert_eq!(child.params.seed, 42);
        assert_eq!(child.params.mode, GenerationMode::Inpaint);
        assert_eq!(child.params.prompt, "new roof");
        assert_eq!(child.params.steps, parent.params.steps);
        assert_eq!(child.params.init_ref, Some(ArtifactRef::Result { job: parent.id, index: 0 }));
        assert_eq!(child.params.mask_ref, Some(ArtifactRef::Mask(child.id)));
        assert_eq!(child.capture_id, parent.capture_id);

        let over = InpaintOverrides { seed: Some(7), steps: Some(30), ..Default::default() };
        let child = derive_inpaint_job(&parent, 0, &mask(512, 512), "p", &over, &registry()).unwrap();
        assert_eq!((child.params.seed, child.params.steps), (7, 30));
    }

    #[test]
    fn inpaint_preconditions() {
        let running = job_in(JobState::Sampling);
        assert_eq!(
            derive_inpaint_job(&running, 0, &mask(512, 512), "p", &InpaintOverrides::default(), &registry()),
            Err(JobError::ParentNotCompleted(JobState::Sampling))
        );
        let parent = completed_parent();
        assert!(matches!(
            derive_inpaint_job(&parent, 0, &mask(256, 512), "p", &InpaintOverrides::default(), &registry()),
            Err(JobError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            derive_inpaint_job(&parent, 1, &mask(512, 512), "p", &InpaintOverrides::default(), &registry()),
            Err(JobError::ResultOutOfRange { .. })
        ));
        let bad = InpaintOverrides { steps: Some(0), ..Default::default() };
        assert!(matches!(
            derive_inpaint_job(&parent, 0, &mask(512, 512), "p", &bad, &registry()),
            Err(JobError::ValidationFailed(_))
        ));
    }

    pub(crate) fn arb_request() -> impl Strategy<Value = GenerationRequest> {
        (
            ".{0,20}",
            proptest::option::of(-3i64..1000),
            proptest::option::of(-5i64..200),
            proptest::option::of(0.0f64..40.0),
            proptest::option::of(prop_oneof![Just("euler_a".to_string()), Just("ddim".to_string()), Just("nope".to_string())]),
            proptest::option::of((0i64..300).prop_map(|v| v * 8)),
            proptest::option::of(60i64..2100),
            proptest::option::of(-0.5f64..1.5),
            proptest::option::of(-1i64..10),
        )
            .prop_map(|(prompt, seed, steps, cfg, sampler, width, height, denoise, batch)| GenerationRequest {
                prompt,
                seed,
                steps,
                cfg_scale: cfg,
                sampler,
                width,
                height,
                denoising_strength: denoise,
                batch_size: batch,
                styles: Some(vec![StyleSelection { name: "b".into(), weight: None }]),
                control_units: Some(vec![ControlUnit::new(ControlKind::Depth)]),
                ..Default::default()
            })
    }

    proptest! {
        #[test]
        fn validation_is_idempotent(req in arb_request()) {
            let reg = registry();
            if let Ok(p) = validate_params(&req, &reg) {
                let again = validate_params(&GenerationRequest::from(p.clone()), &reg);
                prop_assert_eq!(again, Ok(p));
            }
        }

        #[test]
        fn styles_never_touch_the_prompt(prompt in ".{0,40}", picks in proptest::collection::vec((0usize..3, 0.0f64..2.0), 0..4)) {
            let reg = registry();
            let names = ["nordic", "a", "b"];
            let styles: Vec<StyleRef> = picks.iter().map(|(i, w)| StyleRef { name: names[*i].into(), weight: *w }).collect();
            let out = format_prompt_with_styles(&prompt, &styles, &reg).unwrap();
            prop_assert!(out.starts_with(&prompt));
            prop_assert_eq!(out.matches("<lora:").count(), styles.len());
        }

        #[test]
        fn lifecycle_never_leaves_terminal_states(events in proptest::collection::vec(0u8..7, 0..40), fractions in proptest::collection::vec(-0.5f64..1.5, 40)) {
            let mut job = job_in(JobState::Queued);
            for (e, f) in events.iter().zip(&fractions) {
                let event = match e {
                    0 => JobEvent::StartPreprocess,
                    1 => JobEvent::Dispatch { seed: 1 },
                    2 => JobEvent::SamplingStarted,
                    3 => JobEvent::Progress(*f),
                    4 => JobEvent::Complete(vec![]),
                    5 => JobEvent::Fail("x".into()),
                    _ => JobEvent::Cancel,
                };
                if let Ok(next) = transition(&job, event) {
                    prop_assert!(!job.state.is_terminal());
                    prop_assert!(next.progress >= job.progress);
                    prop_assert_eq!(next.progress == 1.0, next.state == JobState::Completed);
                    job = next;
                }
            }
        }
    }
}
