//! Diffusion backends. Every backend takes a fully resolved
//! [`BackendRequest`] and reports progress through a callback while it
//! works.

use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;

use crate::job_model::{ControlKind, GenerationMode, Sampler};
use crate::raster::{Channels, GrayImage, RasterError, RasterImage};

pub mod a1111;
pub mod mock;

pub use a1111::{A1111Backend, A1111Config, ControlNetModels};
pub use mock::{mock_generate, MockBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Png(#[from] RasterError),
}

/// A conditioning image with its ControlNet unit settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlImage {
    pub kind: ControlKind,
    pub image: GrayImage,
    pub weight: f64,
    pub guidance_start: f64,
    pub guidance_end: f64,
}

/// Everything a backend needs for one generation, with styles already
/// folded into the prompt and the seed resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendRequest {
    pub final_prompt: String,
    pub negative_prompt: String,
    pub seed: i64,
    pub steps: u32,
    pub cfg_scale: f64,
    pub sampler: Sampler,
    pub width: u32,
    pub height: u32,
    pub mode: GenerationMode,
    pub batch_size: u32,
    pub init_image: Option<RasterImage>,
    pub mask_alpha: Option<GrayImage>,
    pub denoising_strength: f64,
    pub control_images: Vec<ControlImage>,
}

impl BackendRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |msg: String| Err(BackendError::InvalidRequest(msg));
        let dims = (self.width, self.height);
        if self.seed < 0 {
            return bad(format!("seed {} is not resolved", self.seed));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch size and steps must be positive".into());
        }
        let needs_init = self.mode != GenerationMode::TextToImage;
        match (&self.init_image, needs_init) {
            (None, true) => return bad(format!("{:?} requires an init image", self.mode)),
            (Some(_), false) => return bad("text-to-image takes no init image".into()),
            (Some(img), true) => {
                if (img.width(), img.height()) != dims || img.channels() != Channels::Rgba8 {
                    return bad("init image must be Rgba8 at the requested size".into());
                }
            }
            (None, false) => {}
        }
        match (&self.mask_alpha, self.mode == GenerationMode::Inpaint) {
            (None, true) => return bad("inpaint requires a mask".into()),
            (Some(_), false) => return bad("only inpaint takes a mask".into()),
            (Some(m), true) if (m.width(), m.height()) != dims => {
                return bad("mask must match the requested size".into())
            }
            _ => {}
        }
        for c in &self.control_images {
            if (c.image.width(), c.image.height()) != dims {
                return bad(format!("{} control image size mismatch", c.kind.as_str()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendResult {
    pub images: Vec<RasterImage>,
    /// Backend-reported metadata, passed through untouched.
    pub info: String,
}

/// Receives progress fractions in `[0, 1]`.
pub type ProgressSink<'a> = &'a (dyn Fn(f64) + Send + Sync);

#[async_trait]
pub trait Backend: Send + Sync {
    /// Short identifier reported by the health endpoint.
    fn name(&self) -> &'static str;

    /// Runs one generation. On success the sink has seen non-decreasing
    /// values ending with 1.0 and the result holds `batch_size` images at
    /// the requested size.
    async fn generate(
        &self,
        req: &BackendRequest,
        progress: ProgressSink<'_>,
    ) -> Result<BackendResult, BackendError>;

    async fn is_healthy(&self) -> bool;
}
