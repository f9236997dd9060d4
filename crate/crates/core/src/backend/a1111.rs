//! Client for the stable-diffusion-webui REST API (`/sdapi/v1/*`).
//!
//! Payloads are emitted in canonical form: object keys sorted, no
//! whitespace. Control images go out with `module: "none"` because they are
//! already preprocessed.

use std::time::Duration;

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Map, Value};

use super::{Backend, BackendError, BackendRequest, BackendResult, ProgressSink};
use crate::job_model::{ControlKind, GenerationMode};
use crate::raster::{decode_png, encode_gray_png, encode_png, Channels};

pub const TXT2IMG_PATH: &str = "/sdapi/v1/txt2img";
pub const IMG2IMG_PATH: &str = "/sdapi/v1/img2img";
pub const PROGRESS_PATH: &str = "/sdapi/v1/progress";

/// ControlNet model names sent for each control kind.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ControlNetModels {
    pub edge: String,
    pub depth: String,
}

impl Default for ControlNetModels {
    fn default() -> Self {
        Self {
            edge: "control_v11p_sd15_canny".into(),
            depth: "control_v11f1p_sd15_depth".into(),
        }
    }
}

impl ControlNetModels {
    fn for_kind(&self, kind: ControlKind) -> &str {
        match kind {
            ControlKind::Edge => &self.edge,
            ControlKind::Depth => &self.depth,
        }
    }
}

#[derive(Clone, Debug)]
pub struct A1111Config {
    pub base_url: String,
    pub timeout: Duration,
    pub poll_interval: Duration,
    pub models: ControlNetModels,
}

impl A1111Config {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(120),
            poll_interval: Duration::from_millis(500),
            models: ControlNetModels::default(),
        }
    }
}

/// Serializes with object keys in lexicographic order and no insignificant
/// whitespace, independent of how the map was built.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Endpoint path for the request's mode.
pub fn endpoint_for(req: &BackendRequest) -> &'static str {
    match req.mode {
        GenerationMode::TextToImage => TXT2IMG_PATH,
        GenerationMode::ImageToImage | GenerationMode::Inpaint => IMG2IMG_PATH,
    }
}

/// Builds the JSON body for `/sdapi/v1/txt2img` or `/sdapi/v1/img2img`.
pub fn build_payload_value(req: &BackendRequest, models: &ControlNetModels) -> Value {
    let mut body = Map::new();
    body.insert("prompt".into(), json!(req.final_prompt));
    body.insert("negative_prompt".into(), json!(req.negative_prompt));
    body.insert("seed".into(), json!(req.seed));
    body.insert("steps".into(), json!(req.steps));
    body.insert("cfg_scale".into(), json!(req.cfg_scale));
    body.insert("sampler_name".into(), json!(req.sampler.webui_name()));
    body.insert("width".into(), json!(req.width));
    body.insert("height".into(), json!(req.height));
    body.insert("batch_size".into(), json!(req.batch_size));

    if req.mode != GenerationMode::TextToImage {
        if let Some(init) = &req.init_image {
            body.insert("init_images".into(), json!([BASE64.encode(encode_png(init))]));
        }
        body.insert("denoising_strength".into(), json!(req.denoising_strength));
    }
    if req.mode == GenerationMode::Inpaint {
        if let Some(mask) = &req.mask_alpha {
            body.insert("mask".into(), json!(BASE64.encode(encode_gray_png(mask))));
        }
        body.insert("inpainting_fill".into(), json!(1));
        body.insert("inpaint_full_res".into(), json!(false));
    }

    if !req.control_images.is_empty() {
        let mut units: Vec<_> = req.control_images.iter().collect();
        units.sort_by_key(|c| c.kind.as_str() != "edge");
        let args: Vec<Value> = units
            .into_iter()
            .map(|c| {
                json!({
                    "input_image": BASE64.encode(encode_gray_png(&c.image)),
                    "module": "none",
                    "model": models.for_kind(c.kind),
                    "weight": c.weight,
                    "guidance_start": c.guidance_start,
                    "guidance_end": c.guidance_end,
                })
            })
            .collect();
        body.insert(
            "alwayson_scripts".into(),
            json!({ "controlnet": { "args": args } }),
        );
    }
    Value::Object(body)
}

/// Canonical payload bytes.
pub fn a1111_build_payload(req: &BackendRequest, models: &ControlNetModels) -> String {
    canonical_json(&build_payload_value(req, models))
}

/// Decodes a 200 response from txt2img/img2img.
pub fn a1111_parse_response(body: &[u8]) -> Result<BackendResult, BackendError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid json: {e}")))?;
    let images = value
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::MalformedResponse("missing images array".into()))?;
    if images.is_empty() {
        return Err(BackendError::MalformedResponse("no images returned".into()));
    }
    let mut decoded = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let text = img
            .as_str()
            .ok_or_else(|| BackendError::MalformedResponse(format!("images[{i}] is not a string")))?;
        // Some builds prefix a data URL header.
        let text = text.split_once("base64,").map_or(text, |(_, b64)| b64);
        let bytes = BASE64
            .decode(text.trim())
            .map_err(|e| BackendError::MalformedResponse(format!("images[{i}]: {e}")))?;
        let image = decode_png(&bytes)?;
        decoded.push(match image.channels() {
            Channels::Rgba8 => image,
            _ => image.to_rgba8(),
        });
    }
    let info = match value.get("info") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    Ok(BackendResult {
        images: decoded,
        info,
    })
}

/// Reads the `progress` field of a `/sdapi/v1/progress` body, clamped to
/// `[0, 1]`.
pub fn parse_progress(body: &[u8]) -> Result<f64, BackendError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid json: {e}")))?;
    let p = value
        .get("progress")
        .and_then(Value::as_f64)
        .ok_or_else(|| BackendError::MalformedResponse("missing progress".into()))?;
    Ok(p.clamp(0.0, 1.0))
}

pub struct A1111Backend {
    client: reqwest::Client,
    config: A1111Config,
}

impl A1111Backend {
    pub fn new(config: A1111Config) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn config(&self) -> &A1111Config {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn map_error(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.config.timeout)
        } else {
            BackendError::Unavailable(e.to_string())
        }
    }

    /// Current fraction reported by `GET /sdapi/v1/progress`.
    pub async fn a1111_poll_progress(&self) -> Result<f64, BackendError> {
        let resp = self
            .client
            .get(self.url(PROGRESS_PATH))
            .timeout(self.config.poll_interval.max(Duration::from_secs(2)))
            .send()
            .await
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(BackendError::Unavailable(format!(
                "progress endpoint returned {}",
                resp.status()
            )));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        parse_progress(&body)
    }
}

#[async_trait]
impl Backend for A1111Backend {
    fn name(&self) -> &'static str {
        "a1111"
    }

    async fn generate(
        &self,
        req: &BackendRequest,
        progress: ProgressSink<'_>,
    ) -> Result<BackendResult, BackendError> {
        req.validate()?;
        let payload = a1111_build_payload(req, &self.config.models);
        let send = self
            .client
            .post(self.url(endpoint_for(req)))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(payload)
            .timeout(self.config.timeout)
            .send();
        tokio::pin!(send);

        let mut ticker = tokio::time::interval(self.config.poll_interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut last = 0.0f64;
        let response = loop {
            tokio::select! {
                resp = &mut send => break resp.map_err(|e| self.map_error(e))?,
                _ = ticker.tick() => {
                    // A failed poll is not fatal; the generation request decides.
                    if let Ok(p) = self.a1111_poll_progress().await {
                        if p > last {
                            last = p;
                            progress(p);
                        }
                    }
                }
            }
        };

        let status = response.status();
        let body = response.bytes().await.map_err(|e| self.map_error(e))?;
        if !status.is_success() {
            let text = String::from_utf8_lossy(&body);
            return Err(BackendError::Rejected(format!("{status}: {text}")));
        }
        let mut result = a1111_parse_response(&body)?;
        // With batch_size > 1 the webui prepends a grid image.
        let wanted = req.batch_size as usize;
        if result.images.len() < wanted {
            return Err(BackendError::MalformedResponse(format!(
                "expected {wanted} images, got {}",
                result.images.len()
            )));
        }
        let extra = result.images.len() - wanted;
        result.images.drain(..extra);
        if let Some(img) = result
            .images
            .iter()
            .find(|i| (i.width(), i.height()) != (req.width, req.height))
        {
            return Err(BackendError::MalformedResponse(format!(
                "image is {}x{}, requested {}x{}",
                img.width(),
                img.height(),
                req.width,
                req.height
            )));
        }
        progress(1.0);
        Ok(result)
    }

    async fn is_healthy(&self) -> bool {
        self.a1111_poll_progress().await.is_ok()
    }
}
