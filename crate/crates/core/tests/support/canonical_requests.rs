//! The three canonical requests frozen in `tests/fixtures/a1111/`.

use atelier_core::backend::{BackendRequest, ControlImage};
use atelier_core::job_model::{ControlKind, GenerationMode, Sampler};
use atelier_core::raster::{GrayImage, RasterImage};

pub fn txt2img() -> BackendRequest {
    BackendRequest {
        final_prompt: "a timber pavilion in a meadow".into(),
        negative_prompt: "blurry".into(),
        seed: 42,
        steps: 20,
        cfg_scale: 7.0,
        sampler: Sampler::EulerA,
        width: 512,
        height: 512,
        mode: GenerationMode::TextToImage,
        batch_size: 1,
        init_image: None,
        mask_alpha: None,
        denoising_strength: 0.75,
        control_images: vec![],
    }
}

fn init_image() -> RasterImage {
    let mut data = Vec::with_capacity(8 * 8 * 4);
    for y in 0..8u8 {
        for x in 0..8u8 {
            data.extend_from_slice(&[x * 32, y * 32, 128, 255]);
        }
    }
    RasterImage::new(8, 8, atelier_core::raster::Channels::Rgba8, data).unwrap()
}

pub fn img2img() -> BackendRequest {
    BackendRequest {
        final_prompt: "brick facade, <lora:watercolor:0.8>".into(),
        negative_prompt: String::new(),
        seed: 7,
        steps: 12,
        cfg_scale: 6.5,
        sampler: Sampler::DpmPp2M,
        width: 8,
        height: 8,
        mode: GenerationMode::ImageToImage,
        batch_size: 2,
        init_image: Some(init_image()),
        mask_alpha: None,
        denoising_strength: 0.6,
        control_images: vec![],
    }
}

pub fn inpaint_controlnet() -> BackendRequest {
    let mask = GrayImage::from_fn(8, 8, |x, y| if (2..6).contains(&x) && (2..6).contains(&y) { 255 } else { 0 }).unwrap();
    let edge = GrayImage::from_fn(8, 8, |x, _| if x == 4 { 255 } else { 0 }).unwrap();
    let depth = GrayImage::from_fn(8, 8, |_, y| (y * 30) as u8).unwrap();
    BackendRequest {
        final_prompt: "glass canopy".into(),
        negative_prompt: "text, watermark".into(),
        seed: 123456789,
        steps: 30,
        cfg_scale: 7.0,
        sampler: Sampler::EulerA,
        width: 8,
        height: 8,
        mode: GenerationMode::Inpaint,
        batch_size: 1,
        init_image: Some(init_image()),
        mask_alpha: Some(mask),
        denoising_strength: 0.75,
        control_images: vec![
            ControlImage {
                kind: ControlKind::Edge,
                image: edge,
                weight: 1.0,
                guidance_start: 0.0,
                guidance_end: 1.0,
            },
            ControlImage {
                kind: ControlKind::Depth,
                image: depth,
                weight: 0.6,
                guidance_start: 0.1,
                guidance_end: 0.9,
            },
        ],
    }
}

/// (fixture file name, request) for each canonical request.
pub fn all() -> Vec<(&'static str, BackendRequest)> {
    vec![
        ("txt2img.json", txt2img()),
        ("img2img.json", img2img()),
        ("inpaint_controlnet.json", inpaint_controlnet()),
    ]
}
