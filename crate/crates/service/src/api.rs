//! HTTP and WebSocket routes under `/api/v1`.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::events::Envelope;
use crate::manager::{SessionManager, Submission, SubmitError};

pub type Shared = Arc<SessionManager>;

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/sessions", get(list_sessions))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/diff", get(get_diff))
        .route("/api/v1/sessions/{id}/feedback", post(post_feedback))
        .route("/api/v1/sessions/{id}/abort", post(post_abort))
        .route("/api/v1/memory", get(list_memory))
        .route("/api/v1/memory/search", get(search_memory))
        .route("/api/v1/memory/{id}", get(get_example))
        .route("/api/v1/events", get(events))
        .with_state(manager)
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn not_found(what: &str, id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no {what} {id}"))
}

impl IntoResponse for SubmitError {
    fn into_response(self) -> Response {
        let status = match self {
            SubmitError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SubmitError::EmptyFeedback => StatusCode::UNPROCESSABLE_ENTITY,
            SubmitError::AlreadyAnswered(_) | SubmitError::Stale { .. } | SubmitError::NotAwaiting => StatusCode::CONFLICT,
        };
        error(status, self)
    }
}

async fn health(State(m): State<Shared>) -> Response {
    Json(json!({ "status": "ok", "sessions": m.list().len(), "queued": m.queued(), "last_seq": m.events().last_seq() }))
        .into_response()
}

async fn list_sessions(State(m): State<Shared>) -> Response {
    Json(m.list()).into_response()
}

async fn get_session(State(m): State<Shared>, Path(id): Path<String>) -> Response {
    match m.get(&id) {
        Some(v) => Json(v).into_response(),
        None => not_found("session", &id),
    }
}

async fn get_diff(State(m): State<Shared>, Path(id): Path<String>) -> Response {
    match m.diff(&id) {
        Some(d) => Json(d).into_response(),
        None => not_found("session", &id),
    }
}

async fn post_feedback(State(m): State<Shared>, Path(id): Path<String>, Json(sub): Json<Submission>) -> Response {
    match tokio::task::spawn_blocking(move || m.submit(&id, &sub)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

#[derive(Debug, Default, Deserialize)]
struct AbortBody {
    #[serde(default)]
    cause: Option<String>,
}

async fn post_abort(State(m): State<Shared>, Path(id): Path<String>, body: Option<Json<AbortBody>>) -> Response {
    let cause = body.and_then(|b| b.0.cause).unwrap_or_else(|| "closed by reviewer".into());
    match tokio::task::spawn_blocking(move || m.abort(&id, &cause)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn list_memory(State(m): State<Shared>) -> Response {
    Json(m.memory_list()).into_response()
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: String,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    5
}

async fn search_memory(State(m): State<Shared>, Query(p): Query<SearchParams>) -> Response {
    if p.q.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "query must not be empty");
    }
    Json(m.memory_search(&p.q, p.k)).into_response()
}

async fn get_example(State(m): State<Shared>, Path(id): Path<String>) -> Response {
    match m.memory_get(&id) {
        Some(e) => Json(e).into_response(),
        None => not_found("example", &id),
    }
}

#[derive(Debug, Deserialize)]
struct EventParams {
    client: String,
    #[serde(default)]
    since: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct Ack {
    ack: u64,
}

/// Streams every event as an [`Envelope`]. A client resumes after the
/// larger of `since` and its last ack, and acks with `{"ack": seq}`.
async fn events(State(m): State<Shared>, Query(p): Query<EventParams>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_events(m, p, socket))
}

async fn send(socket: &mut WebSocket, env: &Envelope) -> bool {
    let text = serde_json::to_string(env).expect("envelope serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn stream_events(m: Shared, p: EventParams, mut socket: WebSocket) {
    let log = m.events().clone();
    let mut rx = log.subscribe();
    let mut last = p.since.unwrap_or(0).max(log.acked(&p.client));
    for env in log.since(last) {
        if !send(&mut socket, &env).await {
            return;
        }
        last = env.seq;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(env) if env.seq <= last => {}
                Ok(env) => {
                    if !send(&mut socket, &env).await {
                        return;
                    }
                    last = env.seq;
                }
                Err(RecvError::Lagged(_)) => {
                    for env in log.since(last) {
                        if !send(&mut socket, &env).await {
                            return;
                        }
                        last = env.seq;
                    }
                }
                Err(RecvError::Closed) => return,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => match serde_json::from_str::<Ack>(&t) {
                    Ok(a) => {
                        log.ack(&p.client, a.ack);
                    }
                    Err(e) => tracing::debug!("ignoring client message: {e}"),
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
