//! HTTP service that turns CAD viewport captures into diffusion renders.
//!
//! Clients upload a capture, submit a job against it, follow progress over
//! server-sent events and download the results. Every job and artifact is
//! persisted in a [`ProjectStore`](atelier_core::store::ProjectStore).

pub mod error;
pub mod events;
pub mod routes;
pub mod service;

use std::future::Future;

pub use error::ApiError;
pub use events::JobStatus;
pub use routes::router;
pub use service::{Service, ServiceConfig};

/// Serves the API on `listener` until `shutdown` resolves, then stops the
/// workers.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Service,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(service.clone());
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    service.shutdown();
    result
}
