//! Drives one verification session by hand in review mode: every action
//! waits for approval, and one of them is rejected with a correction.

use std::sync::Arc;

use ical::abstraction::{abstract_demo, AbstractionConfig};
use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::engine::Engine;
use ical::hitl::{FeedbackSourceKind, HitlConfig, HitlSession, Pending};
use ical::memory::MemoryStore;
use ical::pipeline::instruction_for;
use ical::sim::{generate_noisy_demo, Catalog, NoiseProfile, Review, Split};

fn main() {
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory);

    let task = catalog.interleaved(Split::Seen, 1)[0];
    let demo = generate_noisy_demo(task, 3, NoiseProfile::typical());
    let draft = abstract_demo(&engine, &instruction_for(task), &demo, &AbstractionConfig::default()).expect("abstraction");
    let cfg = HitlConfig { review_each_step: true, ..HitlConfig::default() };
    let mut s = HitlSession::new(engine.clone(), "walkthrough", &draft, &demo, task, 3, cfg);

    let mut rejected = false;
    while !s.pump().is_terminal() {
        let kind = FeedbackSourceKind::Cli;
        match s.pending().cloned().expect("a pending request") {
            Pending::Review { event_id, index, action, .. } => {
                if index == 2 && !rejected {
                    rejected = true;
                    println!("reject step {index}: {action}");
                    s.submit_review(event_id, Review::Reject("clean the tools before using them".into()), kind).unwrap();
                } else {
                    s.submit_review(event_id, Review::Proceed, kind).unwrap();
                }
            }
            Pending::Feedback { event_id, request } => {
                let text = request.oracle_text().unwrap_or_else(|| "try again".into());
                println!("feedback: {text}");
                s.submit_feedback(event_id, &text, kind).unwrap();
            }
        }
    }
    for e in s.events() {
        println!("{}", serde_json::to_string(e).unwrap());
    }
    println!("status {:?} after {} rounds; memory holds {}", s.status(), s.feedback_rounds(), engine.memory.len());
}
