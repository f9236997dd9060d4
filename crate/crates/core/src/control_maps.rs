//! Conditioning images for the diffusion backend (edge and depth maps) and
//! the mask handling used by local edits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{gaussian_blur, to_grayscale, Channels, GrayImage, RasterError, RasterImage};

/// Largest Sobel response on 8-bit input: 4 * 255.
pub const MAX_SOBEL_MAGNITUDE: f64 = 1020.0;

/// Largest feather radius; the blur sigma is radius / 3 and capped at 10.
pub const MAX_FEATHER_RADIUS: u32 = 30;

/// 16-bit depth sample reserved for background pixels.
pub const DEPTH_BACKGROUND: u16 = 65535;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("image {width}x{height} is too small, both sides must be at least 3")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("depth buffer has no finite depth values")]
    NoGeometry,
    #[error("depth control requested but no depth buffer was supplied")]
    MissingDepth,
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("invalid depth buffer: {0}")]
    InvalidDepth(String),
    #[error("no control map enabled")]
    NothingEnabled,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Parameters of the Canny edge pipeline. Thresholds are in 0-255 units,
/// compared against the Sobel magnitude divided by 4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannySettings {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub sigma: f64,
}

impl Default for CannySettings {
    fn default() -> Self {
        Self {
            low_threshold: 100.0,
            high_threshold: 200.0,
            sigma: 1.4,
        }
    }
}

impl CannySettings {
    pub fn validate(&self) -> Result<(), ControlError> {
        let (lo, hi) = (self.low_threshold, self.high_threshold);
        if !(lo > 0.0 && lo <= hi && hi <= 255.0) {
            return Err(ControlError::InvalidSettings(format!(
                "thresholds must satisfy 0 < low <= high <= 255 (got low={lo}, high={hi})"
            )));
        }
        if !(self.sigma > 0.0 && self.sigma <= 10.0) {
            return Err(ControlError::InvalidSettings(format!(
                "sigma must be in (0, 10] (got {})",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSettings {
    /// Fraction clipped from each end of the finite-depth distribution.
    pub clip_percentile: f64,
}

impl Default for DepthSettings {
    fn default() -> Self {
        Self {
            clip_percentile: 0.02,
        }
    }
}

/// Which control maps to produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlags {
    pub edge: bool,
    pub depth: bool,
}

/// Per-pixel metric depth. Smaller is nearer; `f64::INFINITY` marks
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBuffer {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DepthBuffer {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, ControlError> {
        if width == 0 || height == 0 {
            return Err(ControlError::InvalidDepth("empty buffer".into()));
        }
        if values.len() != width as usize * height as usize {
            return Err(ControlError::InvalidDepth(format!(
                "{} values for a {width}x{height} buffer",
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !(**v == f64::INFINITY || (v.is_finite() && **v > 0.0)))
        {
            return Err(ControlError::InvalidDepth(format!(
                "depth {bad} is neither positive nor background"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Decodes the 16-bit upload format: `v` in `0..=65534` maps linearly
    /// onto `[near, far]`, 65535 is background.
    pub fn from_png16(img: &RasterImage, near: f64, far: f64) -> Result<Self, ControlError> {
        if img.channels() != Channels::Gray16 {
            return Err(ControlError::Raster(RasterError::UnsupportedChannels(
                img.channels(),
            )));
        }
        if !(near.is_finite() && far.is_finite() && near > 0.0 && near < far) {
            return Err(ControlError::InvalidDepth(format!(
                "near/far must satisfy 0 < near < far (got {near}, {far})"
            )));
        }
        let values = img
            .data()
            .chunks_exact(2)
            .map(|s| match u16::from_be_bytes([s[0], s[1]]) {
                DEPTH_BACKGROUND => f64::INFINITY,
                v => near + (far - near) * v as f64 / 65534.0,
            })
            .collect();
        Self::new(img.width(), img.height(), values)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Binary regeneration mask (255 = regenerate) plus its feather radius.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: GrayImage,
    pub feather_radius: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    pub edge: Option<GrayImage>,
    pub depth: Option<GrayImage>,
    pub canny: CannySettings,
    pub depth_settings: DepthSettings,
}

/// Sobel responses for every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub width: u32,
    pub height: u32,
    pub gx: Vec<i32>,
    pub gy: Vec<i32>,
    pub magnitude: Vec<f64>,
    /// `atan2(gy, gx)` in radians, y pointing down.
    pub direction: Vec<f64>,
}

fn require_min_size(img: &GrayImage) -> Result<(), ControlError> {
    if img.width() < 3 || img.height() < 3 {
        return Err(ControlError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

/// 3x3 Sobel gradients with replicate borders.
pub fn sobel_gradients(img: &GrayImage) -> Result<Gradients, ControlError> {
    require_min_size(img)?;
    let (w, h) = (img.width(), img.height());
    let n = w as usize * h as usize;
    let (mut gx, mut gy) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| img.get_clamped(x + dx, y + dy) as i32;
            gx.push((p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1)));
            gy.push((p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1)));
        }
    }
    let magnitude = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| ((a * a + b * b) as f64).sqrt())
        .collect();
    let direction = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (b as f64).atan2(a as f64))
        .collect();
    Ok(Gradients {
        width: w,
        height: h,
        gx,
        gy,
        magnitude,
        direction,
    })
}

/// Unit step along the quantized gradient direction: one of 0, 45, 90 or
/// 135 degrees, signed so that it points up the gradient.
fn forward_step(gx: i32, gy: i32, direction: f64) -> (i64, i64) {
    let mut deg = direction.to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    let axis = if !(22.5..157.5).contains(&deg) {
        (1, 0)
    } else if deg < 67.5 {
        (1, 1)
    } else if deg < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    };
    if axis.0 * gx as i64 + axis.1 * gy as i64 >= 0 {
        axis
    } else {
        (-axis.0, -axis.1)
    }
}

/// Thins ridges to one pixel. A pixel survives when it is strictly larger
/// than its neighbor down the gradient and at least as large as its neighbor
/// up the gradient, so plateaus two pixels wide keep exactly one pixel.
fn non_maximum_suppression(g: &Gradients) -> Vec<f64> {
    let (w, h) = (g.width as i64, g.height as i64);
    let at = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            g.magnitude[(y * w + x) as usize]
        }
    };
    let mut out = vec![0.0; g.magnitude.len()];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let m = g.magnitude[i];
            if m == 0.0 {
                continue;
            }
            let (dx, dy) = forward_step(g.gx[i], g.gy[i], g.direction[i]);
            if m > at(x - dx, y - dy) && m >= at(x + dx, y + dy) {
                out[i] = m;
            }
        }
    }
    out
}

/// Keeps every weak pixel 8-connected to a strong one.
fn hysteresis(thinned: &[f64], width: u32, height: u32, s: &CannySettings) -> GrayImage {
    let (w, h) = (width as i64, height as i64);
    let scaled = |i: usize| thinned[i] / 4.0;
    let mut out = vec![0u8; thinned.len()];
    let mut queue = VecDeque::new();
    for (i, o) in out.iter_mut().enumerate() {
        if thinned[i] > 0.0 && scaled(i) >= s.high_threshold {
            *o = 255;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i as i64) % w, (i as i64) / w);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if out[j] == 0 && thinned[j] > 0.0 && scaled(j) >= s.low_threshold {
                    out[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }
    GrayImage::new(width, height, out).expect("dimensions come from a valid image")
}

/// Canny edge map: blur, Sobel, non-maximum suppression, double threshold
/// and hysteresis. Output pixels are 0 or 255.
pub fn canny_edges(img: &GrayImage, s: &CannySettings) -> Result<GrayImage, ControlError> {
    require_min_size(img)?;
    s.validate()?;
    let blurred = gaussian_blur(img, s.sigma)?;
    let gradients = sobel_gradients(&blurred)?;
    let thinned = non_maximum_suppression(&gradients);
    Ok(hysteresis(&thinned, img.width(), img.height(), s))
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Depth to 8-bit with near bright and background black.
pub fn normalize_depth(d: &DepthBuffer, clip_percentile: f64) -> Result<GrayImage, ControlError> {
    if !(0.0..0.5).contains(&clip_percentile) {
        return Err(ControlError::InvalidSettings(format!(
            "clip percentile must be in [0, 0.5) (got {clip_percentile})"
        )));
    }
    let mut finite: Vec<f64> = d.values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(ControlError::NoGeometry);
    }
    finite.sort_by(f64::total_cmp);
    let near = percentile(&finite, clip_percentile);
    let far = percentile(&finite, 1.0 - clip_percentile);
    let range = far - near;

    let data = d
        .values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                0
            } else if range <= 0.0 {
                255
            } else {
                let v = v.clamp(near, far);
                (255.0 * (far - v) / range + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(GrayImage::new(d.width, d.height, data)?)
}

/// Soft alpha map for compositing a regenerated region.
pub fn feather_mask(m: &MaskSpec) -> Result<GrayImage, ControlError> {
    if m.feather_radius == 0 {
        return Ok(m.mask.clone());
    }
    if m.feather_radius > MAX_FEATHER_RADIUS {
        return Err(ControlError::InvalidSettings(format!(
            "feather radius {} exceeds {MAX_FEATHER_RADIUS}",
            m.feather_radius
        )));
    }
    Ok(gaussian_blur(&m.mask, m.feather_radius as f64 / 3.0)?)
}

/// `out = round((alpha * generated + (255 - alpha) * original) / 255)` per
/// channel. Pixels with alpha 0 are copied from `original` unchanged.
pub fn composite(
    original: &RasterImage,
    generated: &RasterImage,
    alpha: &GrayImage,
) -> Result<RasterImage, ControlError> {
    let dims = (original.width(), original.height());
    for actual in [
        (generated.width(), generated.height()),
        (alpha.width(), alpha.height()),
    ] {
        if actual != dims {
            return Err(ControlError::DimensionMismatch {
                expected: dims,
                actual,
            });
        }
    }
    for img in [original, generated] {
        if img.channels() != Channels::Rgba8 {
            return Err(RasterError::UnsupportedChannels(img.channels()).into());
        }
    }
    let data = original
        .data()
        .chunks_exact(4)
        .zip(generated.data().chunks_exact(4))
        .zip(alpha.data())
        .flat_map(|((o, g), &a)| {
            let a = a as u32;
            let mut px = [0u8; 4];
            for c in 0..4 {
                let num = a * g[c] as u32 + (255 - a) * o[c] as u32;
                // Round half up: floor(num / 255 + 1/2).
                px[c] = ((2 * num + 255) / 510) as u8;
            }
            px
        })
        .collect();
    Ok(RasterImage::new(dims.0, dims.1, Channels::Rgba8, data)?)
}

/// Produces the enabled control maps for a capture.
pub fn build_control_set(
    capture: &RasterImage,
    depth: Option<&DepthBuffer>,
    canny: &CannySettings,
    depth_settings: &DepthSettings,
    enabled: ControlFlags,
) -> Result<ControlSet, ControlError> {
    if !enabled.edge && !enabled.depth {
        return Err(ControlError::NothingEnabled);
    }
    let edge = if enabled.edge {
        Some(canny_edges(&to_grayscale(capture)?, canny)?)
    } else {
        None
    };
    let depth = if enabled.depth {
        let d = depth.ok_or(ControlError::MissingDepth)?;
        let dims = (capture.width(), capture.height());
        if (d.width(), d.height()) != dims {
            return Err(ControlError::DimensionMismatch {
                expected: dims,
                actual: (d.width(), d.height()),
            });
        }
        Some(normalize_depth(d, depth_settings.clip_percentile)?)
    } else {
        None
    };
    Ok(ControlSet {
        edge,
        depth,
        canny: *canny,
        depth_settings: *depth_settings,
    })
}
