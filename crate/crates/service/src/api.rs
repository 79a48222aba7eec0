use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use lams_core::episode::StateFrame;
use lams_core::model::{DirectionGroup, UserAction};
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::BroadcastStream;

use crate::error::ServiceError;
use crate::session::{CreateSession, Registry, SessionInfo};

pub type AppState = Arc<Registry>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(state_frame))
        .route("/sessions/{id}/stream", get(stream_frames))
        .route("/sessions/{id}/input", post(input))
        .route("/sessions/{id}/manual_switch", post(manual_switch))
        .route("/sessions/{id}/grouped_cycle", post(grouped_cycle))
        .route("/sessions/{id}/end", post(end))
        .route("/sessions/{id}/provenance", get(provenance))
        .route("/sessions/{id}/stores", get(stores))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub frame: StateFrame,
}

async fn create(State(reg): State<AppState>, Json(req): Json<CreateSession>) -> Result<impl IntoResponse, ServiceError> {
    let h = reg.create(req)?;
    let frame = (*h.latest()).clone();
    Ok((StatusCode::CREATED, Json(Created { info: h.info, frame })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Listed {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub live: bool,
}

async fn list(State(reg): State<AppState>) -> Json<Vec<Listed>> {
    Json(reg.list().into_iter().map(|(info, live)| Listed { info, live }).collect())
}

/// Latest frame; still served after the session closed.
async fn state_frame(State(reg): State<AppState>, Path(id): Path<String>) -> Result<Json<StateFrame>, ServiceError> {
    Ok(Json((*reg.get(&id)?.latest()).clone()))
}

/// Frames as server-sent events named `frame`, starting with the current
/// one and ending after the frame that reports the trial's end.
async fn stream_frames(
    State(reg): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ServiceError> {
    let (first, rx) = reg.get(&id)?.subscribe()?;
    let skip = Arc::clone(&first);
    let live = BroadcastStream::new(rx).filter_map(move |r| {
        let f = r.ok().filter(|f| !Arc::ptr_eq(f, &skip));
        async move { f }
    });
    // the handle keeps the sender alive, so stop on the ended frame rather than on channel close
    let frames = stream::unfold((Some(first), Box::pin(live), false), |(next, mut live, done)| async move {
        if done {
            return None;
        }
        let f = match next {
            Some(f) => f,
            None => live.next().await?,
        };
        let ended = f.ended.is_some();
        Some((f, (None, live, ended)))
    })
    .map(|f| {
        let ev = SseEvent::default()
            .event("frame")
            .id(f.tick.to_string())
            .json_data(&*f)
            .unwrap_or_else(|_| SseEvent::default().event("error").data("frame serialization failed"));
        Ok(ev)
    });
    Ok(Sse::new(frames).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InputBody {
    pub lateral: f64,
    pub longitudinal: f64,
}

async fn input(
    State(reg): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<InputBody>,
) -> Result<StatusCode, ServiceError> {
    if !(body.lateral.is_finite() && body.longitudinal.is_finite()) {
        return Err(ServiceError::Invalid("input components must be finite".into()));
    }
    reg.get(&id)?.input(UserAction::new(body.lateral, body.longitudinal))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ManualSwitchBody {
    pub slot: DirectionGroup,
}

async fn manual_switch(
    State(reg): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<ManualSwitchBody>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(reg.get(&id)?.manual_switch(body.slot).await?))
}

async fn grouped_cycle(State(reg): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(reg.get(&id)?.grouped_cycle().await?))
}

async fn end(State(reg): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(reg.get(&id)?.end().await?))
}

async fn provenance(State(reg): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(reg.get(&id)?.provenance().await?))
}

async fn stores(State(reg): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(reg.get(&id)?.stores().await?))
}
