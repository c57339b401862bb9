//! Interactive annotation service: a human labels each batch that AdaICL or
//! AdaICL+ selects, and the next round is planned from those labels.
//!
//! Routes:
//! - `POST /sessions` with an experiment config → `201` and the first batch
//! - `GET /sessions/{id}/batch` → pending examples and progress
//! - `POST /sessions/{id}/labels` with `{id: label}` → new phase, next batch
//! - `GET /sessions/{id}/report` → evaluation on the current annotated set
//!
//! Sessions are snapshotted as JSON after every phase change when a snapshot
//! directory is configured, and restored from it on startup.

pub mod api;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::{router, BatchView, LabelsResponse, ReportResponse, ServiceConfig};
pub use session::{Phase, Session, SessionData, SessionError, SessionStore};

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(
    addr: SocketAddr,
    snapshot_dir: Option<PathBuf>,
    config: ServiceConfig,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = match &snapshot_dir {
        Some(dir) => SessionStore::open(dir)?,
        None => SessionStore::in_memory(),
    };
    log::info!("{} session(s) restored", store.len());
    let app = router(Arc::new(store), &config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
