use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use atelier_core::backend::{A1111Backend, A1111Config, Backend, MockBackend};
use atelier_core::control_maps::DepthSettings;
use atelier_core::store::ProjectStore;
use atelier_server::{Service, ServiceConfig};

use crate::config::{BackendKind, Config};
use crate::{Failure, EXIT_BIND, EXIT_IO, EXIT_USAGE};

pub struct Overrides {
    pub config: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub port: Option<u16>,
    pub store: Option<PathBuf>,
    pub a1111_url: Option<String>,
}

fn effective_config(o: &Overrides) -> Result<Config, Failure> {
    let usage = |m: String| Failure::new(EXIT_USAGE, m);
    let mut config = Config::resolve(o.config.as_deref()).map_err(usage)?;
    if let Some(b) = o.backend {
        config.backend = b;
    }
    if let Some(url) = &o.a1111_url {
        config.a1111_url = Some(url.clone());
    }
    if let Some(root) = &o.store {
        config.store_root = root.clone();
    }
    if let Some(port) = o.port {
        let mut addr = config.listen_addr().map_err(usage)?;
        addr.set_port(port);
        config.listen = addr.to_string();
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn backend(config: &Config) -> Result<Arc<dyn Backend>, Failure> {
    Ok(match config.backend {
        BackendKind::Mock => Arc::new(MockBackend::new(Duration::from_millis(config.mock_step_delay_ms))),
        BackendKind::A1111 => {
            let mut c = A1111Config::new(config.a1111_url.clone().unwrap_or_default());
            c.timeout = Duration::from_secs(config.a1111_timeout_secs);
            c.poll_interval = Duration::from_millis(config.poll_interval_ms);
            c.models = config.controlnet_models.clone();
            Arc::new(A1111Backend::new(c).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?)
        }
    })
}

pub fn run(overrides: Overrides) -> Result<(), Failure> {
    let config = effective_config(&overrides)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    runtime.block_on(async move {
        let addr = config.listen_addr().map_err(|m| Failure::new(EXIT_USAGE, m))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::new(EXIT_BIND, format!("cannot listen on {addr}: {e}")))?;
        let store = ProjectStore::open(&config.store_root).map_err(|e| {
            Failure::new(EXIT_USAGE, format!("store {}: {e}", config.store_root.display()))
        })?;
        let service_config = ServiceConfig {
            workers: config.workers,
            canny: config.canny,
            depth: DepthSettings {
                clip_percentile: config.depth_clip_percentile,
            },
            cors_origins: config.cors_origins.clone(),
            ..ServiceConfig::default()
        };
        let backend = backend(&config)?;
        let name = backend.name();
        let service = Service::start(store, backend, service_config)
            .map_err(|e| Failure::new(EXIT_IO, format!("recovering jobs: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
        // Scripts (and tests) read the bound address from this line.
        println!("listening on http://{local} (backend {name}, store {})", config.store_root.display());
        tracing::info!(%local, backend = name, "serving");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        atelier_server::serve(listener, service, shutdown)
            .await
            .map_err(|e| Failure::new(EXIT_IO, e.to_string()))
    })
}
