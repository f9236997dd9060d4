use std::convert::Infallible;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::{AllowOrigin, CorsLayer};

use atelier_core::control_maps::{
    canny_edges, feather_mask, normalize_depth, CannySettings, MaskSpec, MAX_FEATHER_RADIUS,
};
use atelier_core::job_model::{
    derive_inpaint_job, validate_params, ArtifactRef, CaptureId, ControlKind, ControlUnit, GenerationMode,
    GenerationRequest, InpaintOverrides, JobError, JobId, JobState, RenderJob, DEFAULT_DIMENSION,
};
use atelier_core::raster::{decode_png, encode_gray_png, to_grayscale, GrayImage};
use atelier_core::store::{DepthMeta, StoreError};

use crate::error::{parse_json, ApiError};
use crate::events::{JobStatus, Notice};
use crate::service::{ApplyError, Service};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Service) -> Router {
    let limit = service.config().max_upload_bytes;
    let cors = cors_layer(&service.config().cors_origins);
    let api = Router::new()
        .route("/captures", post(create_capture))
        .route("/captures/{id}", get(capture_meta))
        .route("/captures/{id}/image", get(capture_image))
        .route("/captures/{id}/controls/{kind}", get(capture_control_preview))
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/results/{n}", get(job_result))
        .route("/jobs/{id}/mask", get(job_mask))
        .route("/jobs/{id}/controls/{kind}", get(job_control))
        .route("/jobs/{id}/inpaint", post(inpaint_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/styles", get(list_styles))
        .route("/healthz", get(healthz));
    let mut app = Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed")
        })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(service);
    if let Some(cors) = cors {
        app = app.layer(cors);
    }
    app
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
            .allow_headers([header::CONTENT_TYPE]),
    )
}

fn parse_id<T: std::str::FromStr>(raw: &str, what: &str) -> ApiResult<T> {
    raw.parse().map_err(|_| ApiError::not_found(format!("{what} {raw:?} not found")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn apply_error(e: ApplyError) -> ApiError {
    match e {
        ApplyError::Store(e) => e.into(),
        ApplyError::Job(e) => e.into(),
    }
}

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

// ---- captures ----

#[derive(Serialize)]
struct CaptureCreated {
    capture_id: CaptureId,
    width: u32,
    height: u32,
    has_depth: bool,
}

async fn create_capture(
    State(svc): State<Service>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<CaptureCreated>)> {
    let mut multipart = multipart.map_err(|e| ApiError::bad_request("malformed_multipart", e.body_text()))?;
    let (mut color, mut depth, mut near, mut far) = (None, None, None, None);
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request("malformed_multipart", e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "color" => color = Some(field.bytes().await.map_err(bad)?),
            "depth" => depth = Some(field.bytes().await.map_err(bad)?),
            "near" | "far" => {
                let text = field.text().await.map_err(bad)?;
                let v: f64 = text.trim().parse().map_err(|_| {
                    ApiError::bad_request("invalid_depth_meta", format!("{name} must be a number, got {text:?}"))
                })?;
                if name == "near" {
                    near = Some(v)
                } else {
                    far = Some(v)
                }
            }
            _ => {}
        }
    }
    let color = color.ok_or_else(|| ApiError::bad_request("missing_color", "multipart field \"color\" is required"))?;
    let meta = match (near, far) {
        (Some(near), Some(far)) => Some(DepthMeta { near, far }),
        _ => None,
    };
    let created = blocking(move || {
        let store = svc.store();
        let id = store.put_capture(&color, depth.as_deref(), meta)?;
        let meta = store.capture_meta(id)?;
        Ok(CaptureCreated {
            capture_id: id,
            width: meta.width,
            height: meta.height,
            has_depth: meta.depth.is_some(),
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn capture_meta(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: CaptureId = parse_id(&id, "capture")?;
    let meta = svc.store().capture_meta(id)?;
    Ok(Json(json!({ "capture_id": id, "meta": meta })).into_response())
}

async fn capture_image(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: CaptureId = parse_id(&id, "capture")?;
    Ok(png(blocking(move || Ok(svc.store().capture_png(id)?)).await?))
}

#[derive(Deserialize)]
struct PreviewQuery {
    low_threshold: Option<f64>,
    high_threshold: Option<f64>,
    sigma: Option<f64>,
    clip_percentile: Option<f64>,
}

/// Renders a control map for a capture at its native size without creating
/// a job.
async fn capture_control_preview(
    State(svc): State<Service>,
    Path((id, kind)): Path<(String, String)>,
    query: Result<Query<PreviewQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let id: CaptureId = parse_id(&id, "capture")?;
    let kind: ControlKind = parse_id(&kind, "control kind")?;
    let Query(q) = query.map_err(|e| ApiError::bad_request("invalid_query", e.body_text()))?;
    let defaults = svc.config().clone();
    let canny = CannySettings {
        low_threshold: q.low_threshold.unwrap_or(defaults.canny.low_threshold),
        high_threshold: q.high_threshold.unwrap_or(defaults.canny.high_threshold),
        sigma: q.sigma.unwrap_or(defaults.canny.sigma),
    };
    let clip = q.clip_percentile.unwrap_or(defaults.depth.clip_percentile);
    let bytes = blocking(move || {
        let capture = svc.store().get_capture(id)?;
        let map = match kind {
            ControlKind::Edge => canny_edges(&to_grayscale(&capture.image.to_rgba8()).map_err(|e| ApiError::internal(e.to_string()))?, &canny)?,
            ControlKind::Depth => {
                let depth = capture
                    .depth
                    .as_ref()
                    .ok_or_else(|| ApiError::conflict("no_depth", "capture has no depth buffer"))?;
                normalize_depth(depth, clip)?
            }
        };
        Ok(encode_gray_png(&map))
    })
    .await?;
    Ok(png(bytes))
}

// ---- jobs ----

#[derive(Deserialize)]
struct CreateJob {
    capture_id: Option<String>,
    #[serde(flatten)]
    request: GenerationRequest,
}

/// Rounds a capture side to the nearest multiple of 8 inside the accepted
/// range.
fn fit_dimension(v: u32) -> i64 {
    let rounded = ((v as i64 + 4) / 8) * 8;
    rounded.clamp(64, 2048)
}

async fn create_job(State(svc): State<Service>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let CreateJob { capture_id, mut request } = parse_json(&body)?;
    let capture_id = capture_id.ok_or_else(|| ApiError::field("capture_id", "capture_id is required"))?;
    let capture_id: CaptureId = capture_id
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_capture", format!("unknown capture {capture_id}")))?;
    let job = blocking(move || {
        let store = svc.store();
        let meta = match store.capture_meta(capture_id) {
            Err(StoreError::NotFound(_)) => return Err(StoreError::UnknownCapture(capture_id).into()),
            other => other?,
        };
        if request.mask_ref.is_some() {
            return Err(ApiError::field("mask_ref", "masks are attached through the inpaint endpoint"));
        }
        if request.mode == Some(GenerationMode::Inpaint) {
            return Err(ApiError::field("mode", "inpaint jobs are created through the inpaint endpoint"));
        }
        if request.width.is_none() && request.height.is_none() {
            request.width = Some(fit_dimension(meta.width));
            request.height = Some(fit_dimension(meta.height));
        }
        request.width.get_or_insert(DEFAULT_DIMENSION as i64);
        request.height.get_or_insert(DEFAULT_DIMENSION as i64);
        if request.control_units.is_none() {
            let mut units = vec![ControlUnit::new(ControlKind::Edge)];
            if meta.depth.is_some() {
                units.push(ControlUnit::new(ControlKind::Depth));
            }
            request.control_units = Some(units);
        }
        if request.mode == Some(GenerationMode::ImageToImage) && request.init_ref.is_none() {
            request.init_ref = Some(ArtifactRef::Capture(capture_id));
        }
        check_refs(&svc, &request, meta.depth.is_some())?;
        let registry = store.load_style_registry()?;
        let params = validate_params(&request, &registry)?;
        let job = RenderJob::new(capture_id, params);
        svc.submit(&job)?;
        Ok(job)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "state": job.state }))))
}

/// Referenced artifacts must exist before a job may point at them.
fn check_refs(svc: &Service, req: &GenerationRequest, has_depth: bool) -> ApiResult<()> {
    let mut errors = Vec::new();
    if let Some(r) = &req.init_ref {
        if matches!(r, ArtifactRef::Mask(_) | ArtifactRef::Control { .. }) || svc.store().artifact_png(r).is_err() {
            errors.push(("init_ref".to_string(), format!("{r} is not an available image")));
        }
    }
    for (i, unit) in req.control_units.iter().flatten().enumerate() {
        if let Some(r) = &unit.image_ref {
            if svc.store().artifact_png(r).is_err() {
                errors.push((format!("control_units[{i}].image_ref"), format!("{r} does not exist")));
            }
        } else if unit.kind == ControlKind::Depth && !has_depth {
            errors.push((format!("control_units[{i}].kind"), "capture has no depth buffer".to_string()));
        }
    }
    if errors.is_empty() {
        return Ok(());
    }
    Err(ApiError::validation(
        errors
            .into_iter()
            .map(|(field, message)| atelier_core::job_model::FieldError { field, message })
            .collect(),
    ))
}

#[derive(Deserialize)]
struct ListQuery {
    state: Option<String>,
}

async fn list_jobs(State(svc): State<Service>, Query(q): Query<ListQuery>) -> ApiResult<Json<Vec<JobStatus>>> {
    let filter: Option<JobState> = match q.state {
        None => None,
        Some(s) => Some(s.parse().map_err(|e: String| ApiError::bad_request("invalid_query", e))?),
    };
    let jobs = blocking(move || {
        let store = svc.store();
        Ok(match filter {
            Some(s) => store.list_jobs_by_state(s)?,
            None => store.list_jobs()?,
        })
    })
    .await?;
    Ok(Json(jobs.iter().map(|v| JobStatus::new(&v.job, v.revision)).collect()))
}

async fn job_status(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    let id: JobId = parse_id(&id, "job")?;
    let v = svc.store().load_job(id)?;
    Ok(Json(JobStatus::new(&v.job, v.revision)))
}

async fn job_result(State(svc): State<Service>, Path((id, n)): Path<(String, String)>) -> ApiResult<Response> {
    let id: JobId = parse_id(&id, "job")?;
    let v = svc.store().load_job(id)?;
    if v.job.state != JobState::Completed {
        return Err(ApiError::conflict(
            "not_ready",
            format!("job is {}, results exist only once it completes", v.job.state.as_str()),
        ));
    }
    let n: u32 = parse_id(&n, "result")?;
    if n as usize >= v.job.result_refs.len() {
        return Err(ApiError::not_found(format!(
            "result {n} out of range ({} results)",
            v.job.result_refs.len()
        )));
    }
    Ok(png(blocking(move || Ok(svc.store().result_png(id, n)?)).await?))
}

async fn job_mask(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: JobId = parse_id(&id, "job")?;
    svc.store().load_job(id)?;
    Ok(png(svc.store().mask_png(id)?))
}

async fn job_control(State(svc): State<Service>, Path((id, kind)): Path<(String, String)>) -> ApiResult<Response> {
    let id: JobId = parse_id(&id, "job")?;
    let kind: ControlKind = parse_id(&kind, "control kind")?;
    svc.store().load_job(id)?;
    Ok(png(svc.store().control_png(id, kind)?))
}

#[derive(Deserialize)]
struct InpaintBody {
    result_index: Option<u32>,
    mask: String,
    #[serde(default)]
    prompt: String,
    #[serde(default)]
    feather_radius: u32,
    #[serde(default)]
    overrides: InpaintOverrides,
}

async fn inpaint_job(
    State(svc): State<Service>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let parent_id: JobId = parse_id(&id, "job")?;
    let body: InpaintBody = parse_json(&body)?;
    let child = blocking(move || {
        let store = svc.store();
        let parent = store.load_job(parent_id)?.job;
        if parent.state != JobState::Completed {
            return Err(JobError::ParentNotCompleted(parent.state).into());
        }
        if body.feather_radius > MAX_FEATHER_RADIUS {
            return Err(ApiError::field(
                "feather_radius",
                format!("feather_radius out of range (0..={MAX_FEATHER_RADIUS})"),
            ));
        }
        let encoded = body.mask.split_once("base64,").map_or(body.mask.as_str(), |(_, b)| b);
        let bytes = BASE64
            .decode(encoded.trim())
            .map_err(|e| ApiError::bad_request("malformed_mask", format!("mask is not base64: {e}")))?;
        let image = decode_png(&bytes).map_err(|e| ApiError::bad_request("malformed_png", e.to_string()))?;
        let gray = to_grayscale(&image.to_rgba8()).map_err(|e| ApiError::bad_request("malformed_png", e.to_string()))?;
        // Anything at least half on counts as painted.
        let mask = GrayImage::from_fn(gray.width(), gray.height(), |x, y| if gray.get(x, y) >= 128 { 255 } else { 0 })
            .map_err(|e| ApiError::bad_request("malformed_png", e.to_string()))?;
        let spec = MaskSpec {
            mask,
            feather_radius: body.feather_radius,
        };
        let registry = store.load_style_registry()?;
        let child = derive_inpaint_job(
            &parent,
            body.result_index.unwrap_or(0),
            &spec,
            &body.prompt,
            &body.overrides,
            &registry,
        )?;
        let alpha = feather_mask(&spec)?;
        store.put_mask(child.id, &spec.mask, &alpha)?;
        svc.submit(&child)?;
        Ok(child)
    })
    .await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": child.id, "state": child.state, "parent_job": child.parent_job })),
    ))
}

async fn cancel_job(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    let id: JobId = parse_id(&id, "job")?;
    let current = svc.store().load_job(id)?;
    if current.job.state.is_terminal() {
        return Err(ApiError::conflict(
            "not_cancelable",
            format!("job is already {}", current.job.state.as_str()),
        ));
    }
    match svc.cancel(id) {
        Ok(_) => {
            let v = svc.store().load_job(id)?;
            Ok(Json(JobStatus::new(&v.job, v.revision)))
        }
        // It finished between the check and the cancel.
        Err(ApplyError::Job(JobError::InvalidTransition { state, .. })) => Err(ApiError::conflict(
            "not_cancelable",
            format!("job is already {}", state.as_str()),
        )),
        Err(e) => Err(apply_error(e)),
    }
}

struct EventStream {
    rx: Option<tokio::sync::broadcast::Receiver<Notice>>,
    svc: Service,
    id: JobId,
    pending: Option<Event>,
    revision: u64,
    progress: f64,
    done: bool,
}

fn state_event(status: &JobStatus) -> Event {
    Event::default()
        .event("state")
        .data(serde_json::to_string(status).expect("status serializes"))
}

fn progress_event(id: JobId, progress: f64) -> Event {
    Event::default()
        .event("progress")
        .data(json!({ "job_id": id, "progress": progress }).to_string())
}

async fn next_event(mut s: EventStream) -> Option<(Result<Event, Infallible>, EventStream)> {
    if let Some(ev) = s.pending.take() {
        return Some((Ok(ev), s));
    }
    if s.done {
        return None;
    }
    let rx = s.rx.as_mut()?;
    loop {
        match rx.recv().await {
            Ok(n) if n.revision() <= s.revision => continue,
            Ok(Notice::Progress { revision, progress }) => {
                s.revision = revision;
                if progress > s.progress {
                    s.progress = progress;
                    let ev = progress_event(s.id, progress);
                    return Some((Ok(ev), s));
                }
            }
            Ok(Notice::State(status)) => {
                s.revision = status.revision;
                s.progress = s.progress.max(status.progress);
                s.done = status.state.is_terminal();
                return Some((Ok(state_event(&status)), s));
            }
            Err(RecvError::Lagged(_)) => {
                // Fell behind: resynchronize from the store.
                let v = s.svc.store().load_job(s.id).ok()?;
                if v.revision <= s.revision {
                    continue;
                }
                s.revision = v.revision;
                s.progress = s.progress.max(v.job.progress);
                s.done = v.job.state.is_terminal();
                return Some((Ok(state_event(&JobStatus::new(&v.job, v.revision))), s));
            }
            Err(RecvError::Closed) => return None,
        }
    }
}

async fn job_events(
    State(svc): State<Service>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let id: JobId = parse_id(&id, "job")?;
    // Subscribe before reading so nothing between the read and the
    // subscription is lost; older notices are skipped by revision.
    let rx = svc.events().subscribe(id);
    let v = match svc.store().load_job(id) {
        Ok(v) => v,
        Err(e) => {
            drop(rx);
            svc.events().release(id);
            return Err(e.into());
        }
    };
    let terminal = v.job.state.is_terminal();
    let rx = if terminal {
        drop(rx);
        svc.events().release(id);
        None
    } else {
        Some(rx)
    };
    let stream = EventStream {
        rx,
        svc,
        id,
        pending: Some(state_event(&JobStatus::new(&v.job, v.revision))),
        revision: v.revision,
        progress: v.job.progress,
        done: terminal,
    };
    Ok(Sse::new(stream::unfold(stream, next_event)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

// ---- misc ----

async fn list_styles(State(svc): State<Service>) -> ApiResult<Response> {
    let registry = svc.store().load_style_registry()?;
    Ok(Json(registry.entries()).into_response())
}

async fn healthz(State(svc): State<Service>) -> Json<serde_json::Value> {
    let healthy = svc.backend().is_healthy().await;
    Json(json!({
        "status": if healthy { "ok" } else { "degraded" },
        "backend": svc.backend().name(),
    }))
}
