//! A stand-in for the webui HTTP API that replays recorded responses.
//!
//! Generation endpoints answer with the file recorded for
//! `(endpoint, batch_size)`; the progress endpoint climbs by 0.25 per poll.

#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;

/// `tests/fixtures/a1111` of the core crate, from whichever crate includes
/// this module.
pub fn fixtures_dir() -> PathBuf {
    let here = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let core = if here.join("tests/fixtures/a1111").is_dir() { here } else { here.join("../core") };
    core.join("tests/fixtures/a1111")
}

pub fn recorded_dir() -> PathBuf {
    fixtures_dir().join("recorded")
}

#[derive(Clone, Copy, Debug)]
pub enum Behavior {
    Replay,
    Status(u16),
    Garbage,
    Hang,
}

struct Inner {
    responses: HashMap<(String, u64), String>,
    received: Mutex<Vec<(String, String)>>,
    polls: AtomicU32,
    delay: Duration,
    behavior: Behavior,
}

pub struct FakeWebui {
    pub addr: SocketAddr,
    inner: Arc<Inner>,
    task: tokio::task::JoinHandle<()>,
}

impl FakeWebui {
    pub async fn start(delay: Duration, behavior: Behavior) -> Self {
        let mut responses = HashMap::new();
        for (endpoint, batch, file) in [
            ("txt2img", 1, "txt2img_b1.json"),
            ("img2img", 1, "img2img_b1.json"),
            ("img2img", 2, "img2img_b2.json"),
        ] {
            let body = std::fs::read_to_string(recorded_dir().join(file))
                .unwrap_or_else(|e| panic!("recorded response {file}: {e}"));
            responses.insert((endpoint.to_string(), batch), body);
        }
        let inner = Arc::new(Inner {
            responses,
            received: Mutex::new(Vec::new()),
            polls: AtomicU32::new(0),
            delay,
            behavior,
        });
        let app = Router::new()
            .route("/sdapi/v1/txt2img", post(|s, b| generate(s, "txt2img", b)))
            .route("/sdapi/v1/img2img", post(|s, b| generate(s, "img2img", b)))
            .route("/sdapi/v1/progress", get(progress))
            .with_state(inner.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self { addr, inner, task }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// (endpoint, raw body) of every generation request seen so far.
    pub fn received(&self) -> Vec<(String, String)> {
        self.inner.received.lock().unwrap().clone()
    }

    pub fn polls(&self) -> u32 {
        self.inner.polls.load(Ordering::SeqCst)
    }
}

impl Drop for FakeWebui {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn generate(State(inner): State<Arc<Inner>>, endpoint: &'static str, body: String) -> (StatusCode, String) {
    inner.received.lock().unwrap().push((endpoint.to_string(), body.clone()));
    tokio::time::sleep(inner.delay).await;
    match inner.behavior {
        Behavior::Status(code) => (StatusCode::from_u16(code).unwrap(), "{\"error\":\"OutOfMemoryError\"}".into()),
        Behavior::Garbage => (StatusCode::OK, "{\"images\":\"nope\"}".into()),
        Behavior::Hang => {
            tokio::time::sleep(Duration::from_secs(3600)).await;
            (StatusCode::OK, String::new())
        }
        Behavior::Replay => {
            let parsed: serde_json::Value = match serde_json::from_str(&body) {
                Ok(v) => v,
                Err(_) => return (StatusCode::UNPROCESSABLE_ENTITY, "{\"detail\":\"bad json\"}".into()),
            };
            let batch = parsed["batch_size"].as_u64().unwrap_or(1);
            match inner.responses.get(&(endpoint.to_string(), batch)) {
                Some(r) => (StatusCode::OK, r.clone()),
                None => (StatusCode::NOT_FOUND, "{\"detail\":\"no recording\"}".into()),
            }
        }
    }
}

async fn progress(State(inner): State<Arc<Inner>>) -> String {
    let n = inner.polls.fetch_add(1, Ordering::SeqCst) + 1;
    let p = (f64::from(n) * 0.25).min(0.95);
    format!("{{\"progress\":{p},\"eta_relative\":1.5,\"state\":{{\"job_count\":1}}}}")
}
