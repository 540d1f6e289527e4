//! HTTP job service over the ncdkit engine.
//!
//! Training and clustering run on a fixed pool of worker threads and are
//! polled through `/jobs/{id}`; everything else answers inline.

pub mod api;
pub mod jobs;
pub mod store;

use std::net::SocketAddr;

pub use api::{router, AppState, ServiceConfig};

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("ncdkit service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(&config))).await
}
