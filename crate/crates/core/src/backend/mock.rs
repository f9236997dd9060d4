//! Deterministic stand-in for a diffusion model.
//!
//! Output is a seeded value-noise field tinted by the prompt. Edge control
//! images are stamped in as dark lines and depth maps shade the field, so
//! tests can see conditioning reach the result without any network.

use std::time::Duration;

use async_trait::async_trait;

use super::{Backend, BackendError, BackendRequest, BackendResult, ProgressSink};
use crate::control_maps::composite;
use crate::job_model::{ControlKind, GenerationMode};
use crate::raster::{Channels, RasterImage};

#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    /// Sleep per sampling step, so tests can observe a job mid-flight.
    pub step_delay: Duration,
}

impl MockBackend {
    pub fn new(step_delay: Duration) -> Self {
        Self { step_delay }
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    async fn generate(
        &self,
        req: &BackendRequest,
        progress: ProgressSink<'_>,
    ) -> Result<BackendResult, BackendError> {
        req.validate()?;
        for step in 1..=req.steps {
            if !self.step_delay.is_zero() {
                tokio::time::sleep(self.step_delay).await;
            }
            progress(step as f64 / req.steps as f64);
        }
        let result = mock_generate(req)?;
        progress(1.0);
        Ok(result)
    }

    async fn is_healthy(&self) -> bool {
        true
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(key: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(key ^ splitmix64((ix as u64) ^ splitmix64(iy as u64 ^ 0x5851_f42d_4c95_7f2d)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(key: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
    let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
    let a = lattice(key, ix, iy);
    let b = lattice(key, ix + 1, iy);
    let c = lattice(key, ix, iy + 1);
    let d = lattice(key, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

fn blend(a: u8, b: u8, t: f64) -> u8 {
    ((1.0 - t) * a as f64 + t * b as f64 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn noise_image(req: &BackendRequest, seed: i64, prompt_hash: u64) -> RasterImage {
    let (w, h) = (req.width, req.height);
    let key = splitmix64(
        splitmix64(seed as u64) ^ splitmix64(prompt_hash) ^ ((w as u64) << 32 | h as u64),
    );
    let tint = [
        64 + (prompt_hash & 0xff) as u32 % 192,
        64 + ((prompt_hash >> 8) & 0xff) as u32 % 192,
        64 + ((prompt_hash >> 16) & 0xff) as u32 % 192,
    ];
    let coarse = (w.min(h) as f64 / 8.0).max(8.0);
    let fine = coarse / 4.0;

    let edge = req.control_images.iter().find(|c| c.kind == ControlKind::Edge);
    let depth = req.control_images.iter().find(|c| c.kind == ControlKind::Depth);

    let mut data = Vec::with_capacity(w as usize * h as usize * 4);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut n = 0.7 * value_noise(key, px, py, coarse)
                + 0.3 * value_noise(key.rotate_left(17), px, py, fine);
            if let Some(d) = depth {
                let opacity = (d.weight / 2.0).clamp(0.0, 1.0);
                n *= 1.0 - opacity + opacity * d.image.get(x, y) as f64 / 255.0;
            }
            let mut rgb = tint.map(|t| (n * t as f64 + 0.5).floor().clamp(0.0, 255.0) as u8);
            if let Some(e) = edge {
                if e.image.get(x, y) == 255 {
                    let opacity = (e.weight / 2.0).clamp(0.0, 1.0);
                    rgb = rgb.map(|v| blend(v, 0, opacity));
                }
            }
            data.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
    }
    RasterImage::new(w, h, Channels::Rgba8, data).expect("validated dimensions")
}

/// Pure, deterministic generation. Batch item `i` uses seed `seed + i`.
pub fn mock_generate(req: &BackendRequest) -> Result<BackendResult, BackendError> {
    req.validate()?;
    let prompt_hash = fnv1a64(req.final_prompt.as_bytes());
    let mut images = Vec::with_capacity(req.batch_size as usize);
    for i in 0..req.batch_size {
        let noise = noise_image(req, req.seed.wrapping_add(i as i64), prompt_hash);
        let image = match (req.mode, &req.init_image) {
            (GenerationMode::TextToImage, _) | (_, None) => noise,
            (mode, Some(init)) => {
                let s = req.denoising_strength;
                let data = init
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&a, &b)| blend(a, b, s))
                    .collect();
                let blended = RasterImage::new(req.width, req.height, Channels::Rgba8, data)?;
                match (mode, &req.mask_alpha) {
                    (GenerationMode::Inpaint, Some(alpha)) => composite(init, &blended, alpha)
                        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?,
                    _ => blended,
                }
            }
        };
        images.push(image);
    }
    Ok(BackendResult {
        images,
        info: format!(
            "{{\"backend\":\"mock\",\"seed\":{},\"prompt_hash\":\"{prompt_hash:016x}\"}}",
            req.seed
        ),
    })
}
