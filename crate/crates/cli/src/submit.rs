use std::path::PathBuf;
use std::time::Duration;

use futures::StreamExt;
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::{json, Map, Value};

use crate::{Failure, EXIT_IMAGE, EXIT_IO, EXIT_JOB, EXIT_UNREACHABLE, EXIT_USAGE};

#[derive(clap::Args)]
pub struct Args {
    /// Service base URL, e.g. http://127.0.0.1:8470
    #[arg(long)]
    server: String,
    #[arg(long)]
    capture: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    negative_prompt: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    seed: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    steps: Option<i64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    width: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    height: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    batch_size: Option<i64>,
    /// Style as NAME or NAME:WEIGHT; repeatable.
    #[arg(long = "style")]
    styles: Vec<String>,
    /// Control unit kind (edge, depth); repeatable. Omit for server defaults.
    #[arg(long = "control")]
    controls: Vec<String>,
    /// Send no control units at all.
    #[arg(long, conflicts_with = "controls")]
    no_control: bool,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    /// Follow the job until it ends and download its results.
    #[arg(long)]
    wait: bool,
    /// Where --wait writes results.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn unreachable(server: &str, e: reqwest::Error) -> Failure {
    Failure::new(EXIT_UNREACHABLE, format!("cannot reach {server}: {e}"))
}

/// Renders an API error body for the terminal.
fn describe(status: StatusCode, body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return format!("{status}: {body}");
    };
    let mut out = format!("{status} {}: {}", v["code"].as_str().unwrap_or("?"), v["message"].as_str().unwrap_or(""));
    for fe in v["field_errors"].as_array().into_iter().flatten() {
        out.push_str(&format!("\n  {}: {}", fe["field"].as_str().unwrap_or("?"), fe["message"].as_str().unwrap_or("")));
    }
    out
}

fn job_body(a: &Args, capture_id: &str) -> Result<Value, Failure> {
    let mut body = Map::new();
    body.insert("capture_id".into(), json!(capture_id));
    body.insert("prompt".into(), json!(a.prompt));
    macro_rules! opt {
        ($($f:ident),*) => {$(
            if let Some(v) = &a.$f {
                body.insert(stringify!($f).into(), json!(v));
            }
        )*};
    }
    opt!(negative_prompt, seed, steps, cfg_scale, sampler, width, height, batch_size);
    if !a.styles.is_empty() {
        let mut styles = Vec::new();
        for s in &a.styles {
            styles.push(match s.split_once(':') {
                None => json!({ "name": s }),
                Some((name, w)) => {
                    let w: f64 = w
                        .parse()
                        .map_err(|_| Failure::new(EXIT_USAGE, format!("--style {s}: weight is not a number")))?;
                    json!({ "name": name, "weight": w })
                }
            });
        }
        body.insert("styles".into(), Value::Array(styles));
    }
    if a.no_control {
        body.insert("control_units".into(), json!([]));
    } else if !a.controls.is_empty() {
        let units: Vec<_> = a.controls.iter().map(|k| json!({ "kind": k })).collect();
        body.insert("control_units".into(), Value::Array(units));
    }
    Ok(Value::Object(body))
}

pub fn run(a: Args) -> Result<(), Failure> {
    if a.depth.is_some() != (a.near.is_some() && a.far.is_some()) || a.near.is_some() != a.far.is_some() {
        return Err(Failure::new(EXIT_USAGE, "--depth, --near and --far go together"));
    }
    let color = std::fs::read(&a.capture).map_err(|e| Failure::new(EXIT_IMAGE, format!("{}: {e}", a.capture.display())))?;
    let depth = match &a.depth {
        Some(p) => Some(std::fs::read(p).map_err(|e| Failure::new(EXIT_IMAGE, format!("{}: {e}", p.display())))?),
        None => None,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    runtime.block_on(submit(&a, color, depth))
}

async fn submit(a: &Args, color: Vec<u8>, depth: Option<Vec<u8>>) -> Result<(), Failure> {
    let base = format!("{}/api/v1", a.server.trim_end_matches('/'));
    let client = reqwest::Client::builder()
        .connect_timeout(Duration::from_secs(5))
        .build()
        .map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;

    let mut form = Form::new().part("color", Part::bytes(color).file_name("capture.png"));
    if let (Some(d), Some(near), Some(far)) = (depth, a.near, a.far) {
        form = form
            .part("depth", Part::bytes(d).file_name("depth.png"))
            .text("near", near.to_string())
            .text("far", far.to_string());
    }
    let resp = client
        .post(format!("{base}/captures"))
        .multipart(form)
        .send()
        .await
        .map_err(|e| unreachable(&a.server, e))?;
    let status = resp.status();
    let text = resp.text().await.map_err(|e| unreachable(&a.server, e))?;
    if status != StatusCode::CREATED {
        let code = if status == StatusCode::BAD_REQUEST { EXIT_IMAGE } else { EXIT_IO };
        return Err(Failure::new(code, format!("capture upload failed: {}", describe(status, &text))));
    }
    let capture: Value = serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    let capture_id = capture["capture_id"].as_str().unwrap_or_default().to_string();

    let resp = client
        .post(format!("{base}/jobs"))
        .json(&job_body(a, &capture_id)?)
        .send()
        .await
        .map_err(|e| unreachable(&a.server, e))?;
    let status = resp.status();
    let text = resp.text().await.map_err(|e| unreachable(&a.server, e))?;
    match status {
        StatusCode::ACCEPTED => {}
        StatusCode::UNPROCESSABLE_ENTITY => {
            return Err(Failure::new(EXIT_JOB, format!("job rejected: {}", describe(status, &text))))
        }
        _ => return Err(Failure::new(EXIT_IO, format!("job submission failed: {}", describe(status, &text)))),
    }
    let job: Value = serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    let job_id = job["job_id"].as_str().unwrap_or_default().to_string();
    println!("{job_id}");
    if !a.wait {
        return Ok(());
    }

    let final_state = follow(&client, &base, &job_id, &a.server).await?;
    match final_state["state"].as_str() {
        Some("completed") => {}
        Some(state) => {
            let why = final_state["error"].as_str().unwrap_or("no error recorded");
            return Err(Failure::new(EXIT_JOB, format!("job {job_id} ended {state}: {why}")));
        }
        None => return Err(Failure::new(EXIT_IO, "event stream ended without a final state")),
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", a.out_dir.display())))?;
    let count = final_state["result_count"].as_u64().unwrap_or(0);
    for n in 0..count {
        let resp = client
            .get(format!("{base}/jobs/{job_id}/results/{n}"))
            .send()
            .await
            .map_err(|e| unreachable(&a.server, e))?;
        if !resp.status().is_success() {
            let status = resp.status();
            let text = resp.text().await.unwrap_or_default();
            return Err(Failure::new(EXIT_IO, format!("downloading result {n}: {}", describe(status, &text))));
        }
        let bytes = resp.bytes().await.map_err(|e| unreachable(&a.server, e))?;
        let path = a.out_dir.join(format!("{job_id}-{n}.png"));
        std::fs::write(&path, &bytes).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Reads the job's event stream until its terminal state event.
async fn follow(client: &reqwest::Client, base: &str, job_id: &str, server: &str) -> Result<Value, Failure> {
    let resp = client
        .get(format!("{base}/jobs/{job_id}/events"))
        .send()
        .await
        .map_err(|e| unreachable(server, e))?;
    if !resp.status().is_success() {
        let status = resp.status();
        let text = resp.text().await.unwrap_or_default();
        return Err(Failure::new(EXIT_IO, format!("event stream: {}", describe(status, &text))));
    }
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let mut last_state = Value::Null;
    while let Some(chunk) = stream.next().await {
        let chunk = chunk.map_err(|e| unreachable(server, e))?;
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut event = "message";
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = if v.trim() == "state" { "state" } else { "other" };
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if event != "state" {
                continue;
            }
            let Ok(v) = serde_json::from_str::<Value>(&data) else { continue };
            eprintln!("{job_id}: {}", v["state"].as_str().unwrap_or("?"));
            let terminal = matches!(v["state"].as_str(), Some("completed" | "failed" | "canceled"));
            last_state = v;
            if terminal {
                return Ok(last_state);
            }
        }
    }
    Ok(last_state)
}
