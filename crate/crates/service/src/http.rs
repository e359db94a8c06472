use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use cmc_core::controller::export_trace_string;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::error::{ServiceError, ServiceResult};
use crate::session::{
    DecisionOutcome, DecisionRequest, EpisodeOutcome, Estimates, EventView, Mode, SessionConfig,
    SessionView,
};
use crate::store::SessionStore;

type Store = State<Arc<SessionStore>>;

#[derive(Debug, Deserialize)]
struct ModeRequest {
    mode: Mode,
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ServiceResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn create_session(
    State(store): Store,
    payload: Result<Json<SessionConfig>, JsonRejection>,
) -> ServiceResult<(StatusCode, Json<SessionView>)> {
    let view = store.create(body(payload)?)?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(store): Store,
    Path(id): Path<String>,
) -> ServiceResult<Json<SessionView>> {
    Ok(Json(store.get(&id)?.view()))
}

async fn get_event(State(store): Store, Path(id): Path<String>) -> ServiceResult<Json<EventView>> {
    Ok(Json(store.get(&id)?.event()?))
}

async fn post_decision(
    State(store): Store,
    Path(id): Path<String>,
    payload: Result<Json<DecisionRequest>, JsonRejection>,
) -> ServiceResult<Json<DecisionOutcome>> {
    let slot = store.get(&id)?;
    Ok(Json(slot.post_decision(body(payload)?)?))
}

async fn end_episode(
    State(store): Store,
    Path(id): Path<String>,
) -> ServiceResult<Json<EpisodeOutcome>> {
    Ok(Json(store.get(&id)?.end_episode()?))
}

async fn get_estimates(
    State(store): Store,
    Path(id): Path<String>,
) -> ServiceResult<Json<Estimates>> {
    Ok(Json(store.get(&id)?.estimates().as_ref().clone()))
}

async fn get_trace_csv(
    State(store): Store,
    Path(id): Path<String>,
) -> ServiceResult<impl IntoResponse> {
    let estimates = store.get(&id)?.estimates();
    Ok((
        [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
        export_trace_string(&estimates.trace),
    ))
}

async fn hot_swap(State(store): Store, Path(id): Path<String>) -> ServiceResult<Json<SessionView>> {
    Ok(Json(store.get(&id)?.hot_swap()?))
}

async fn set_mode(
    State(store): Store,
    Path(id): Path<String>,
    payload: Result<Json<ModeRequest>, JsonRejection>,
) -> ServiceResult<Json<SessionView>> {
    let slot = store.get(&id)?;
    Ok(Json(slot.set_mode(body(payload)?.mode)?))
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/event", get(get_event))
        .route("/sessions/{id}/decision", post(post_decision))
        .route("/sessions/{id}/episode/end", post(end_episode))
        .route("/sessions/{id}/estimates", get(get_estimates))
        .route("/sessions/{id}/trace.csv", get(get_trace_csv))
        .route("/sessions/{id}/hot-swap", post(hot_swap))
        .route("/sessions/{id}/mode", post(set_mode))
        .with_state(store)
}

/// Serves until `shutdown` resolves or the listener fails.
pub async fn serve<F>(
    listener: TcpListener,
    store: Arc<SessionStore>,
    shutdown: F,
) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(store))
        .with_graceful_shutdown(shutdown)
        .await
}
