mod common;

use axum::http::StatusCode;
use common::*;
use ical_service::api::router;
use serde_json::json;

#[tokio::test]
async fn sessions_are_listed_and_fetched() {
    let app = router(manager(true, 6, 2, 256));
    let (st, list) = get(&app, "/api/v1/sessions").await;
    assert_eq!(st, StatusCode::OK);
    let list = list.as_array().unwrap();
    assert_eq!(list.iter().filter(|s| s["status"] == "awaiting_review").count(), 2);
    let id = list[0]["session_id"].as_str().unwrap();
    let (st, v) = get(&app, &format!("/api/v1/sessions/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["pending"]["kind"], "review");
    assert!(v["program"].as_str().unwrap().contains('('));
    assert_eq!(get(&app, "/api/v1/sessions/nope").await.0, StatusCode::NOT_FOUND);
    let (st, h) = get(&app, "/api/v1/health").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["queued"], 4);
}

#[tokio::test]
async fn accepting_a_review_runs_the_step() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let (st, v) = post(&app, &format!("/api/v1/sessions/{id}/feedback"), json!({"event_id": ev, "decision": "accept"})).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["steps"].as_array().unwrap().len(), 1);
    assert!(v["pending"]["event_id"].as_u64().unwrap() > ev);
    assert_eq!(v["feedback_rounds"], 0);
}

#[tokio::test]
async fn rejecting_records_the_feedback_in_the_lineage() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let uri = format!("/api/v1/sessions/{id}/feedback");
    let (st, v) = post(&app, &uri, json!({"event_id": ev, "decision": "reject", "text": "  wash the mug before using it "})).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["feedback_rounds"], 1);
    assert_eq!(v["lineage"][0]["feedback"], "wash the mug before using it");
    assert_eq!(v["attempts"], 1);
    let (st, d) = get(&app, &format!("/api/v1/sessions/{id}/diff")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(d["to"], "current");
    assert!(d["lines"].as_array().unwrap().iter().all(|l| ["equal", "insert", "delete"].contains(&l["tag"].as_str().unwrap())));
}

#[tokio::test]
async fn empty_rejection_is_refused_without_side_effects() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let uri = format!("/api/v1/sessions/{id}/feedback");
    for body in [json!({"event_id": ev, "decision": "reject"}), json!({"event_id": ev, "decision": "reject", "text": " \n"})] {
        assert_eq!(post(&app, &uri, body).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (_, v) = get(&app, &format!("/api/v1/sessions/{id}")).await;
    assert_eq!(v["pending"]["event_id"], ev);
    assert_eq!(v["feedback_rounds"], 0);
    // The event is still open after a refused answer.
    assert_eq!(post(&app, &uri, json!({"event_id": ev, "decision": "accept"})).await.0, StatusCode::OK);
}

#[tokio::test]
async fn second_answer_to_an_event_conflicts() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let uri = format!("/api/v1/sessions/{id}/feedback");
    let body = json!({"event_id": ev, "decision": "reject", "text": "open the fridge first"});
    let (a, b) = tokio::join!(post(&app, &uri, body.clone()), post(&app, &uri, body.clone()));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let (st, err) = post(&app, &uri, body).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(err["error"].as_str().unwrap().contains("already answered"));
    let (_, v) = get(&app, &format!("/api/v1/sessions/{id}")).await;
    assert_eq!(v["lineage"].as_array().unwrap().len(), 1);
    assert_eq!(v["feedback_rounds"], 1);
}

#[tokio::test]
async fn unknown_event_ids_conflict() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let (st, err) = post(&app, &format!("/api/v1/sessions/{id}/feedback"), json!({"event_id": ev + 40, "decision": "accept"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(err["error"].as_str().unwrap().contains("not pending"));
    let (st, _) = post(&app, "/api/v1/sessions/ghost/feedback", json!({"event_id": 1, "decision": "accept"})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn terminal_sessions_conflict() {
    let app = router(manager(true, 1, 1, 256));
    let (id, ev) = waiting(&app, "review").await.unwrap();
    let (st, v) = post(&app, &format!("/api/v1/sessions/{id}/abort"), json!({"cause": "wrong demo"})).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "aborted");
    assert_eq!(v["abort_cause"], "wrong demo");
    let (st, _) = post(&app, &format!("/api/v1/sessions/{id}/feedback"), json!({"event_id": ev, "decision": "accept"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(post(&app, &format!("/api/v1/sessions/{id}/abort"), json!({})).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn accepting_a_failure_uses_the_environment_message() {
    let app = router(manager(false, 24, 24, 1024));
    let (id, ev) = waiting(&app, "feedback").await.expect("a session awaiting feedback");
    let (_, before) = get(&app, &format!("/api/v1/sessions/{id}")).await;
    let req = &before["pending"]["request"];
    let expected = req["failure"].as_str().or(req["unmet_goals"][0].as_str()).unwrap().to_string();
    let (st, v) = post(&app, &format!("/api/v1/sessions/{id}/feedback"), json!({"event_id": ev, "decision": "accept"})).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["lineage"][0]["feedback"], expected.as_str());
    assert_ne!(v["program"], before["program"], "the revision changed nothing");
    let (_, d) = get(&app, &format!("/api/v1/sessions/{id}/diff")).await;
    assert_eq!((d["from"].as_str(), d["to"].as_str()), (Some("attempt 1"), Some("current")));
    assert!(d["lines"].as_array().unwrap().iter().any(|l| l["tag"] != "equal"));
    assert!(d["unified"].as_str().unwrap().starts_with("--- attempt 1"));
}

#[tokio::test]
async fn approved_sessions_fill_the_memory() {
    let m = manager(true, 3, 1, 4096);
    let app = router(m.clone());
    let mut answered = 0;
    while let Some((id, ev)) = waiting(&app, "review").await.or(waiting(&app, "feedback").await) {
        let (st, _) = post(&app, &format!("/api/v1/sessions/{id}/feedback"), json!({"event_id": ev, "decision": "accept"})).await;
        assert_eq!(st, StatusCode::OK);
        answered += 1;
        assert!(answered < 2000, "sessions never finish");
    }
    let (_, list) = get(&app, "/api/v1/sessions").await;
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 3, "each finished session opens the next");
    assert!(list.iter().all(|s| ["accepted", "exhausted"].contains(&s["status"].as_str().unwrap())));

    let (_, mem) = get(&app, "/api/v1/memory").await;
    let accepted = list.iter().filter(|s| s["status"] == "accepted").count();
    assert!(accepted > 0);
    assert_eq!(mem.as_array().unwrap().len(), accepted);
    let first = &mem[0];
    let id = first["example_id"].as_str().unwrap();
    let (st, ex) = get(&app, &format!("/api/v1/memory/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(ex.get("embeddings").is_none());
    assert_eq!(get(&app, "/api/v1/memory/none").await.0, StatusCode::NOT_FOUND);

    let q = first["instruction"].as_str().unwrap().replace(' ', "%20");
    let (st, hits) = get(&app, &format!("/api/v1/memory/search?q={q}&k=2")).await;
    assert_eq!(st, StatusCode::OK);
    let hits = hits.as_array().unwrap();
    assert!(!hits.is_empty() && hits.len() <= 2);
    assert_eq!(hits[0]["example_id"], id);
    assert_eq!(get(&app, "/api/v1/memory/search?q=%20").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}
