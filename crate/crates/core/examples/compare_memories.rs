//! Learns a memory from noisy demonstrations with the rule-driven mock model
//! and compares deployment success against raw-demo and empty memories.

use std::sync::Arc;
use std::time::Instant;

use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::deploy::{evaluate_suite, DeployConfig};
use ical::engine::Engine;
use ical::hitl::ScriptedOracle;
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, learn, raw_demo_memory, LearnConfig};
use ical::sim::{Catalog, NoiseProfile, Split};

fn main() {
    let started = Instant::now();
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder.clone(), memory);

    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let demos = generate_demos(&catalog, Split::Seen, n, 7, NoiseProfile::typical());
    let summary = learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    print!("{}", summary.table());

    let tasks: Vec<_> = catalog.interleaved(Split::Unseen, 50).into_iter().cloned().collect();
    let cfg = DeployConfig::default();
    let raw = engine.with_memory(Arc::new(raw_demo_memory(&engine, &catalog, &demos).expect("raw memory")));
    let empty = engine.with_memory(Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim())));
    for (label, e) in [("ical", &engine), ("raw", &raw), ("empty", &empty)] {
        let report = evaluate_suite(e, label, &tasks, None, 1000, &cfg);
        print!("{}", report.table());
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
}
