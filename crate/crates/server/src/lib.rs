//! HTTP control plane over a [`SessionManager`]: request/response endpoints
//! plus a server-sent event stream for the operator console.

use std::convert::Infallible;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Serialize;
use sleeploop::session::{ControlCommand, SessionConfig, SessionError, SessionEvent, SessionManager};
use tokio::sync::mpsc;

/// Period of status snapshots on `/stream`.
pub const STATUS_PERIOD: Duration = Duration::from_millis(500);

#[derive(Clone)]
struct AppState {
    manager: Arc<SessionManager>,
    status_period: Duration,
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    router_with_period(manager, STATUS_PERIOD)
}

/// Same routes with a custom status period on `/stream`.
pub fn router_with_period(manager: Arc<SessionManager>, status_period: Duration) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/session/start", post(start))
        .route("/session/stop", post(stop))
        .route("/command", post(command))
        .route("/stream", get(stream))
        .with_state(AppState { manager, status_period })
}

/// Error body: `{"error": "<kind>", "message": "<text>"}`.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: &'static str,
    message: String,
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, error) = match &e {
            SessionError::AlreadyRunning => (StatusCode::CONFLICT, "already_running"),
            SessionError::NotRunning => (StatusCode::CONFLICT, "not_running"),
            SessionError::BadConfig(_) => (StatusCode::BAD_REQUEST, "bad_config"),
            SessionError::UnknownCommand(_) => (StatusCode::BAD_REQUEST, "unknown_command"),
            SessionError::InvalidValue(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
            SessionError::Io { .. } | SessionError::Bus(_) | SessionError::Engine(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError { status, error, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// Runs a blocking manager call off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SessionError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, error: "internal", message: e.to_string() }),
    }
}

async fn status(State(st): State<AppState>) -> Result<Response, ApiError> {
    let m = st.manager;
    Ok(Json(blocking(move || Ok(m.snapshot())).await?).into_response())
}

/// Accepts a JSON config, or TOML when the content type says so.
async fn start(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::from(SessionError::BadConfig(e.to_string())))?;
    let is_toml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("toml"));
    let cfg = if is_toml { SessionConfig::from_toml(text) } else { SessionConfig::from_json(text) }?;
    let m = st.manager;
    Ok(Json(blocking(move || m.start(cfg)).await?).into_response())
}

async fn stop(State(st): State<AppState>) -> Result<Response, ApiError> {
    let m = st.manager;
    Ok(Json(blocking(move || m.stop()).await?).into_response())
}

async fn command(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let text = String::from_utf8_lossy(&body).into_owned();
    let cmd = ControlCommand::from_json(&text)?;
    let m = st.manager;
    Ok(Json(blocking(move || m.command(cmd)).await?).into_response())
}

/// Moves events from the hub's channel onto the async side until either end goes away.
fn forward(events: Receiver<SessionEvent>, tx: mpsc::Sender<SessionEvent>) {
    loop {
        match events.recv_timeout(Duration::from_millis(250)) {
            Ok(e) => {
                if tx.blocking_send(e).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) if tx.is_closed() => return,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

fn json_event(name: &str, value: &impl Serialize) -> Event {
    match serde_json::to_string(value) {
        Ok(data) => Event::default().event(name).data(data),
        Err(e) => Event::default().event("error").data(e.to_string()),
    }
}

struct StreamState {
    manager: Arc<SessionManager>,
    ticker: tokio::time::Interval,
    events: mpsc::Receiver<SessionEvent>,
}

/// `status` snapshots at a fixed period, interleaved with every logged
/// session event under its kind name (`stim_delivered`, `stage_change`, ...).
async fn stream(State(st): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let (tx, rx) = mpsc::channel(1024);
    let hub = st.manager.subscribe_events();
    std::thread::Builder::new()
        .name("stream-forward".into())
        .spawn(move || forward(hub, tx))
        .expect("spawn stream forwarder");
    let mut ticker = tokio::time::interval(st.status_period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let init = StreamState { manager: st.manager, ticker, events: rx };
    let feed = futures::stream::unfold(init, |mut s| async move {
        let event = tokio::select! {
            Some(e) = s.events.recv() => json_event(e.kind.name(), &e),
            _ = s.ticker.tick() => {
                let m = Arc::clone(&s.manager);
                match tokio::task::spawn_blocking(move || m.snapshot()).await {
                    Ok(report) => json_event("status", &report),
                    Err(e) => Event::default().event("error").data(e.to_string()),
                }
            }
        };
        Some((Ok(event), s))
    });
    Sse::new(feed).keep_alive(KeepAlive::default())
}
