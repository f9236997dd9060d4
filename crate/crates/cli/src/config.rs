//! The JSON configuration file. Every field is optional; absent fields take
//! the defaults below. Unknown fields are rejected so typos surface.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use atelier_core::backend::ControlNetModels;
use atelier_core::control_maps::CannySettings;
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "ATELIER_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    A1111,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    pub store_root: PathBuf,
    pub backend: BackendKind,
    pub a1111_url: Option<String>,
    pub a1111_timeout_secs: u64,
    pub poll_interval_ms: u64,
    pub workers: usize,
    pub canny: CannySettings,
    pub depth_clip_percentile: f64,
    pub cors_origins: Vec<String>,
    /// Per-step delay of the mock backend, so progress is observable.
    pub mock_step_delay_ms: u64,
    pub controlnet_models: ControlNetModels,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8470".into(),
            store_root: PathBuf::from("atelier-data"),
            backend: BackendKind::Mock,
            a1111_url: None,
            a1111_timeout_secs: 120,
            poll_interval_ms: 500,
            workers: 1,
            canny: CannySettings::default(),
            depth_clip_percentile: 0.02,
            cors_origins: vec!["http://localhost:5173".into()],
            mock_step_delay_ms: 5,
            controlnet_models: ControlNetModels::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Explicit path, else `$ATELIER_CONFIG`, else built-in defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, String> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, String> {
        self.listen
            .parse()
            .map_err(|_| format!("listen must be host:port, got {:?}", self.listen))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.listen_addr()?;
        if self.backend == BackendKind::A1111 && self.a1111_url.as_deref().is_none_or(str::is_empty) {
            return Err("backend \"a1111\" requires a1111_url".into());
        }
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.poll_interval_ms == 0 || self.a1111_timeout_secs == 0 {
            return Err("poll_interval_ms and a1111_timeout_secs must be positive".into());
        }
        self.canny.validate().map_err(|e| format!("canny: {e}"))?;
        if !(0.0..0.5).contains(&self.depth_clip_percentile) {
            return Err("depth_clip_percentile must be in [0, 0.5)".into());
        }
        Ok(())
    }
}
