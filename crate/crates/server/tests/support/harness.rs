//! Spins up the API on an ephemeral port with the mock backend.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use atelier_core::backend::{Backend, MockBackend};
use atelier_core::raster::{encode_png, Channels, RasterImage};
use atelier_core::store::ProjectStore;
use atelier_server::{JobStatus, Service, ServiceConfig};
use futures::StreamExt;
use serde_json::Value;

pub struct Harness {
    pub base: String,
    pub client: reqwest::Client,
    pub service: Service,
    dir: Option<tempfile::TempDir>,
    server: tokio::task::JoinHandle<()>,
}

impl Drop for Harness {
    fn drop(&mut self) {
        self.service.shutdown();
        self.server.abort();
    }
}

impl Harness {
    pub async fn start() -> Self {
        Self::with_backend(Arc::new(MockBackend::new(Duration::from_millis(1))), ServiceConfig::default()).await
    }

    pub async fn slow() -> Self {
        Self::with_backend(Arc::new(MockBackend::new(Duration::from_millis(40))), ServiceConfig::default()).await
    }

    pub async fn with_backend(backend: Arc<dyn Backend>, config: ServiceConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::in_dir(dir, backend, config).await
    }

    pub async fn in_dir(dir: tempfile::TempDir, backend: Arc<dyn Backend>, config: ServiceConfig) -> Self {
        let store = ProjectStore::open(dir.path()).unwrap();
        let service = Service::start(store, backend, config).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}/api/v1", listener.local_addr().unwrap());
        let app = atelier_server::router(service.clone());
        let server = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self {
            base,
            client: reqwest::Client::new(),
            service,
            dir: Some(dir),
            server,
        }
    }

    /// Stops this instance and hands back its store directory.
    pub fn stop(mut self) -> tempfile::TempDir {
        self.dir.take().unwrap()
    }

    pub fn root(&self) -> &std::path::Path {
        self.dir.as_ref().unwrap().path()
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn upload(&self, color: Vec<u8>) -> reqwest::Response {
        let form = reqwest::multipart::Form::new().part("color", reqwest::multipart::Part::bytes(color));
        self.client.post(self.url("/captures")).multipart(form).send().await.unwrap()
    }

    pub async fn upload_with_depth(&self, color: Vec<u8>, depth: Vec<u8>, near_far: Option<(f64, f64)>) -> reqwest::Response {
        let mut form = reqwest::multipart::Form::new()
            .part("color", reqwest::multipart::Part::bytes(color))
            .part("depth", reqwest::multipart::Part::bytes(depth));
        if let Some((near, far)) = near_far {
            form = form.text("near", near.to_string()).text("far", far.to_string());
        }
        self.client.post(self.url("/captures")).multipart(form).send().await.unwrap()
    }

    pub async fn capture(&self, w: u32, h: u32) -> String {
        let resp = self.upload(scene_png(w, h)).await;
        assert_eq!(resp.status(), 201);
        resp.json::<Value>().await.unwrap()["capture_id"].as_str().unwrap().to_string()
    }

    pub async fn post_json(&self, path: &str, body: &Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(body).send().await.unwrap()
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> reqwest::Response {
        self.client
            .post(self.url(path))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap()
    }

    pub async fn submit(&self, body: Value) -> String {
        let resp = self.post_json("/jobs", &body).await;
        let status = resp.status();
        let json: Value = resp.json().await.unwrap();
        assert_eq!(status, 202, "{json}");
        json["job_id"].as_str().unwrap().to_string()
    }

    pub async fn status(&self, job: &str) -> JobStatus {
        let resp = self.client.get(self.url(&format!("/jobs/{job}"))).send().await.unwrap();
        assert_eq!(resp.status(), 200);
        resp.json().await.unwrap()
    }

    pub async fn wait_for(&self, job: &str, pred: impl Fn(&JobStatus) -> bool) -> JobStatus {
        for _ in 0..500 {
            let s = self.status(job).await;
            if pred(&s) {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job} never reached the expected state");
    }

    pub async fn wait_terminal(&self, job: &str) -> JobStatus {
        self.wait_for(job, |s| s.state.is_terminal()).await
    }

    pub async fn result(&self, job: &str, n: u32) -> reqwest::Response {
        self.client.get(self.url(&format!("/jobs/{job}/results/{n}"))).send().await.unwrap()
    }

    /// Reads the whole SSE stream of a job as (event, data) pairs.
    pub async fn events(&self, job: &str) -> Vec<(String, Value)> {
        let resp = self.client.get(self.url(&format!("/jobs/{job}/events"))).send().await.unwrap();
        assert_eq!(resp.status(), 200);
        assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
        read_sse(resp).await
    }
}

pub async fn read_sse(resp: reqwest::Response) -> Vec<(String, Value)> {
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut events = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    loop {
        let chunk = tokio::time::timeout_at(deadline, body.next()).await.expect("event stream stalled");
        let Some(chunk) = chunk else { break };
        buf.push_str(std::str::from_utf8(&chunk.unwrap()).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut name = String::from("message");
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if !data.is_empty() {
                events.push((name, serde_json::from_str(&data).unwrap()));
            }
        }
    }
    events
}

/// A synthetic elevation: sky, a building block and a ground plane, so the
/// edge detector has something to find.
pub fn scene(w: u32, h: u32) -> RasterImage {
    let mut data = Vec::with_capacity((w * h * 4) as usize);
    for y in 0..h {
        for x in 0..w {
            let px = if y > h * 3 / 4 {
                [90, 120, 70, 255]
            } else if x > w / 4 && x < w * 3 / 4 && y > h / 3 {
                [180, 170, 160, 255]
            } else {
                [200, 220, 250, 255]
            };
            data.extend_from_slice(&px);
        }
    }
    RasterImage::new(w, h, Channels::Rgba8, data).unwrap()
}

pub fn scene_png(w: u32, h: u32) -> Vec<u8> {
    encode_png(&scene(w, h))
}

pub fn depth_png(w: u32, h: u32) -> Vec<u8> {
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| if y < h / 3 { 65535u16 } else { ((x + y) * 37 % 60000) as u16 }))
        .flat_map(u16::to_be_bytes)
        .collect();
    encode_png(&RasterImage::new(w, h, Channels::Gray16, data).unwrap())
}

/// Every error body must have exactly this shape.
pub fn assert_api_error(body: &Value, status: u16) {
    assert_eq!(body["status"], status, "{body}");
    assert!(body["code"].as_str().is_some_and(|c| !c.is_empty()), "{body}");
    assert!(body["message"].is_string(), "{body}");
    assert!(body["field_errors"].is_array(), "{body}");
}
