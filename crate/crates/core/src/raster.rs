//! Raster images, the PNG codec and the elementary transforms every other
//! module builds on.
//!
//! Every image that crosses a process boundary is a PNG. Encoding is
//! deterministic (no filtering, fixed compression level, no ancillary
//! chunks) so stored artifacts can be compared byte for byte.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted width or height, in pixels.
pub const MAX_DIMENSION: u32 = 16384;

/// Errors produced by raster operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("malformed png: {0}")]
    MalformedPng(String),
    #[error("unsupported png: {0}")]
    UnsupportedPng(String),
    #[error("unsupported channel layout {0:?}")]
    UnsupportedChannels(Channels),
    #[error("invalid dimensions {width}x{height} (each side must be in 1..={MAX_DIMENSION})")]
    InvalidDimensions { width: u32, height: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("blur sigma {0} outside (0, 10]")]
    InvalidSigma(f64),
}

/// Pixel layout of a [`RasterImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channels {
    Gray8,
    /// One big-endian 16-bit sample per pixel.
    Gray16,
    Rgba8,
}

impl Channels {
    pub fn bytes_per_pixel(self) -> usize {
        match self {
            Channels::Gray8 => 1,
            Channels::Gray16 => 2,
            Channels::Rgba8 => 4,
        }
    }
}

fn check_dimensions(width: u32, height: u32) -> Result<(), RasterError> {
    if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(RasterError::InvalidDimensions { width, height });
    }
    Ok(())
}

/// A decoded image: row-major pixels in one of the supported layouts.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl RasterImage {
    pub fn new(
        width: u32,
        height: u32,
        channels: Channels,
        data: Vec<u8>,
    ) -> Result<Self, RasterError> {
        check_dimensions(width, height)?;
        let expected = width as usize * height as usize * channels.bytes_per_pixel();
        if data.len() != expected {
            return Err(RasterError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An Rgba8 image where every pixel is `rgba`.
    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Result<Self, RasterError> {
        check_dimensions(width, height)?;
        let data = rgba
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 4)
            .collect();
        Self::new(width, height, Channels::Rgba8, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Raw bytes of the pixel at `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let bpp = self.channels.bytes_per_pixel();
        let start = (y as usize * self.width as usize + x as usize) * bpp;
        &self.data[start..start + bpp]
    }

    /// Converts to Rgba8, replicating gray into the color channels.
    /// 16-bit gray keeps the high byte.
    pub fn to_rgba8(&self) -> RasterImage {
        let data = match self.channels {
            Channels::Rgba8 => return self.clone(),
            Channels::Gray8 => self.data.iter().flat_map(|&v| [v, v, v, 255]).collect(),
            Channels::Gray16 => self
                .data
                .chunks_exact(2)
                .flat_map(|s| [s[0], s[0], s[0], 255])
                .collect(),
        };
        RasterImage {
            width: self.width,
            height: self.height,
            channels: Channels::Rgba8,
            data,
        }
    }
}

impl From<GrayImage> for RasterImage {
    fn from(img: GrayImage) -> Self {
        RasterImage {
            width: img.width,
            height: img.height,
            channels: Channels::Gray8,
            data: img.data,
        }
    }
}

/// A single-channel 8-bit image. Edge maps, depth maps and masks use it.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dimensions(width, height)?;
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(RasterError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self, RasterError> {
        check_dimensions(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, RasterError> {
        check_dimensions(width, height)?;
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Accepts Gray8 rasters only.
    pub fn try_from_raster(img: &RasterImage) -> Result<Self, RasterError> {
        match img.channels() {
            Channels::Gray8 => Ok(Self {
                width: img.width(),
                height: img.height(),
                data: img.data().to_vec(),
            }),
            other => Err(RasterError::UnsupportedChannels(other)),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Pixel lookup with coordinates clamped into the image (replicate border).
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as u32;
        let y = y.clamp(0, self.height as i64 - 1) as u32;
        self.get(x, y)
    }

    /// Rotates a quarter turn clockwise.
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut out = GrayImage {
            width: h,
            height: w,
            data: vec![0; self.data.len()],
        };
        for y in 0..h {
            for x in 0..w {
                out.set(h - 1 - y, x, self.get(x, y));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width as usize) {
            row.reverse();
        }
        out
    }

    pub fn transpose(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut out = GrayImage {
            width: h,
            height: w,
            data: vec![0; self.data.len()],
        };
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(x, y));
            }
        }
        out
    }
}

/// Decodes gray 8/16-bit and RGB/RGBA 8-bit PNGs. RGB gains an opaque alpha.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, RasterError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| RasterError::MalformedPng(e.to_string()))?;

    let (width, height, color, depth, interlaced) = {
        let info = reader.info();
        (
            info.width,
            info.height,
            info.color_type,
            info.bit_depth,
            info.interlaced,
        )
    };
    if interlaced {
        return Err(RasterError::UnsupportedPng("interlaced".into()));
    }
    let channels = match (color, depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => Channels::Gray8,
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => Channels::Gray16,
        (png::ColorType::Rgb, png::BitDepth::Eight)
        | (png::ColorType::Rgba, png::BitDepth::Eight) => Channels::Rgba8,
        (color, depth) => {
            return Err(RasterError::UnsupportedPng(format!(
                "{color:?} at {} bits",
                depth as u8
            )))
        }
    };
    check_dimensions(width, height)?;

    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::MalformedPng("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| RasterError::MalformedPng(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    // Reading to the end validates the trailing chunks and their CRCs.
    reader
        .finish()
        .map_err(|e| RasterError::MalformedPng(e.to_string()))?;

    let data = if color == png::ColorType::Rgb {
        buf.chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect()
    } else {
        buf
    };
    RasterImage::new(width, height, channels, data)
}

/// Encodes with filter type None and a fixed compression level, so equal
/// images always produce identical bytes.
pub fn encode_png(img: &RasterImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width(), img.height());
        let (color, depth) = match img.channels() {
            Channels::Gray8 => (png::ColorType::Grayscale, png::BitDepth::Eight),
            Channels::Gray16 => (png::ColorType::Grayscale, png::BitDepth::Sixteen),
            Channels::Rgba8 => (png::ColorType::Rgba, png::BitDepth::Eight),
        };
        encoder.set_color(color);
        encoder.set_depth(depth);
        encoder.set_compression(png::Compression::Balanced);
        encoder.set_filter(png::Filter::NoFilter);
        // Writing into a Vec cannot fail and the header was built from a
        // validated image.
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(img.data()).expect("png image data");
        writer.finish().expect("png trailer");
    }
    out
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    encode_png(&RasterImage::from(img.clone()))
}

/// Decodes a PNG that must be 8-bit grayscale (masks, control maps).
pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage, RasterError> {
    GrayImage::try_from_raster(&decode_png(bytes)?)
}

fn round_to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// BT.601 luma, rounded half up. Gray8 input passes through unchanged.
pub fn to_grayscale(img: &RasterImage) -> Result<GrayImage, RasterError> {
    match img.channels() {
        Channels::Gray8 => GrayImage::try_from_raster(img),
        Channels::Gray16 => Err(RasterError::UnsupportedChannels(Channels::Gray16)),
        Channels::Rgba8 => {
            let data = img
                .data()
                .chunks_exact(4)
                .map(|p| {
                    round_to_u8(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                })
                .collect();
            GrayImage::new(img.width(), img.height(), data)
        }
    }
}

/// Source coordinate and blend weight for one output column or row under
/// half-pixel-center mapping.
fn bilinear_taps(out_len: u32, in_len: u32) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor();
            let hi = (lo + 1.0).min(max);
            (lo as usize, hi as usize, src - lo)
        })
        .collect()
}

/// Bilinear resampling with half-pixel-center coordinates. Same-size
/// requests return a copy.
pub fn resize_bilinear(
    img: &RasterImage,
    new_width: u32,
    new_height: u32,
) -> Result<RasterImage, RasterError> {
    check_dimensions(new_width, new_height)?;
    if new_width == img.width() && new_height == img.height() {
        return Ok(img.clone());
    }
    let xs = bilinear_taps(new_width, img.width());
    let ys = bilinear_taps(new_height, img.height());
    let in_w = img.width() as usize;

    let (samples, max): (Vec<f64>, f64) = match img.channels() {
        Channels::Gray16 => (
            img.data()
                .chunks_exact(2)
                .map(|s| u16::from_be_bytes([s[0], s[1]]) as f64)
                .collect(),
            65535.0,
        ),
        _ => (img.data().iter().map(|&v| v as f64).collect(), 255.0),
    };
    let cpp = match img.channels() {
        Channels::Rgba8 => 4,
        _ => 1,
    };

    let mut out = Vec::with_capacity(new_width as usize * new_height as usize * cpp);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..cpp {
                let at = |x: usize, y: usize| samples[(y * in_w + x) * cpp + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = ((top * (1.0 - fy) + bottom * fy) + 0.5).floor().clamp(0.0, max);
                out.push(v);
            }
        }
    }
    let data = match img.channels() {
        Channels::Gray16 => out
            .into_iter()
            .flat_map(|v| (v as u16).to_be_bytes())
            .collect(),
        _ => out.into_iter().map(|v| v as u8).collect(),
    };
    RasterImage::new(new_width, new_height, img.channels(), data)
}

pub fn resize_gray(img: &GrayImage, new_width: u32, new_height: u32) -> Result<GrayImage, RasterError> {
    let resized = resize_bilinear(&RasterImage::from(img.clone()), new_width, new_height)?;
    GrayImage::try_from_raster(&resized)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with replicate borders. Intermediate values stay
/// in floating point; only the final output is rounded.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage, RasterError> {
    if !(sigma > 0.0 && sigma <= 10.0) {
        return Err(RasterError::InvalidSigma(sigma));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);

    let mut horizontal = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        let row = &img.data()[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x + i as i64 - radius).clamp(0, w - 1);
                acc += k * row[sx as usize] as f64;
            }
            horizontal[(y * w + x) as usize] = acc;
        }
    }

    let mut data = vec![0u8; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y + i as i64 - radius).clamp(0, h - 1);
                acc += k * horizontal[(sy * w + x) as usize];
            }
            data[(y * w + x) as usize] = round_to_u8(acc);
        }
    }
    GrayImage::new(img.width(), img.height(), data)
}
