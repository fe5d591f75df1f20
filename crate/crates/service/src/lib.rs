//! HTTP/JSON front end for tracecommit.
//!
//! Every operation is a `POST` with a JSON body from `tracecommit-api`.
//! Compute-heavy work runs on the blocking pool; calibrated deployments are
//! cached by seed and library digest. `POST /v1/providers` starts a framed
//! TCP provider that verifiers, including `/v1/audit`, can connect to.

mod error;
mod handlers;
mod providers;
mod state;

use axum::routing::{get, post};
use axum::Router;
use tokio::net::TcpListener;
use tracecommit_api as api;

pub use error::ApiError;
pub use state::AppState;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(api::HEALTH, get(handlers::health))
        .route(api::LIBRARY_GENERATE, post(handlers::generate_library))
        .route(api::CALIBRATE, post(handlers::calibrate))
        .route(api::ATTACK, post(handlers::attack))
        .route(api::BOUNDS, post(handlers::bounds))
        .route(api::ROTATE_CV, post(handlers::rotate_cv))
        .route(api::FPR_SIM, post(handlers::fpr_sim))
        .route(api::SWEEP, post(handlers::sweep))
        .route(api::BENCH, post(handlers::bench))
        .route(api::AUDIT, post(handlers::audit))
        .route(api::SVIP, post(handlers::svip))
        .route(api::PROVIDERS, post(handlers::start_provider).get(handlers::list_providers))
        .route(
            &format!("{}/{{id}}", api::PROVIDERS),
            get(handlers::get_provider).delete(handlers::stop_provider),
        )
        .with_state(state)
}

/// Serves the router on `listener` until the task is cancelled.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
