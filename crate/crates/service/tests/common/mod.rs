#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::engine::Engine;
use ical::hitl::HitlConfig;
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, LearnConfig};
use ical::sim::{Catalog, NoiseProfile, Split};
use ical_service::events::EventLog;
use ical_service::manager::SessionManager;
use serde_json::Value;
use tower::ServiceExt;

pub fn manager(review: bool, demos: usize, concurrent: usize, buffer: usize) -> Arc<SessionManager> {
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory);
    let demos = generate_demos(&catalog, Split::Seen, demos, 7, NoiseProfile::typical());
    let cfg = LearnConfig { hitl: HitlConfig { review_each_step: review, n_feedbacks_max: 3, ..HitlConfig::default() }, ..LearnConfig::default() };
    let m = SessionManager::new(engine, catalog, cfg, demos, concurrent, Arc::new(EventLog::new(buffer)));
    m.fill();
    Arc::new(m)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body)).await
}

/// The first session that is waiting on `kind` (`review` or `feedback`).
pub async fn waiting(app: &Router, kind: &str) -> Option<(String, u64)> {
    let (_, list) = get(app, "/api/v1/sessions").await;
    for s in list.as_array().unwrap() {
        let id = s["session_id"].as_str().unwrap();
        let (_, v) = get(app, &format!("/api/v1/sessions/{id}")).await;
        if v["pending"]["kind"] == kind {
            return Some((id.to_string(), v["pending"]["event_id"].as_u64().unwrap()));
        }
    }
    None
}
