//! Success rate as the learned memory grows.

use std::sync::Arc;

use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::deploy::DeployConfig;
use ical::engine::Engine;
use ical::hitl::ScriptedOracle;
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, learn, sweep, sweep_table, LearnConfig};
use ical::sim::{Catalog, NoiseProfile, Split};

fn main() {
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder.clone(), memory);

    let demos = generate_demos(&catalog, Split::Seen, 60, 7, NoiseProfile::typical());
    let summary = learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    println!("learned {} examples", summary.accepted);

    let tasks: Vec<_> = catalog.interleaved(Split::Unseen, 50).into_iter().cloned().collect();
    let points = sweep(&engine, &tasks, None, &[0, 5, 10, 25, 50, engine.memory.len()], 1000, &DeployConfig::default());
    print!("{}", sweep_table(&points));
}
