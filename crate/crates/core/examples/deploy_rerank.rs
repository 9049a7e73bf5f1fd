//! Deploys on held-out tasks with a single prompt and with reranking over
//! several candidates, in both execution modes.

use std::sync::Arc;

use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::deploy::{evaluate_suite, DeployConfig, ExecMode, RerankConfig};
use ical::engine::Engine;
use ical::hitl::ScriptedOracle;
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, learn, LearnConfig};
use ical::sim::{Catalog, NoiseProfile, Split};

fn main() {
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory);
    let demos = generate_demos(&catalog, Split::Seen, 30, 7, NoiseProfile::typical());
    learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);

    let tasks: Vec<_> = catalog.interleaved(Split::Unseen, 20).into_iter().cloned().collect();
    for mode in [ExecMode::ProgramOnce, ExecMode::StepLoop] {
        for rerank in [None, Some(RerankConfig::default())] {
            let cfg = DeployConfig { mode, rerank, ..DeployConfig::default() };
            let label = format!("{mode:?}{}", if rerank.is_some() { "+rerank" } else { "" });
            let r = evaluate_suite(&engine, &label, &tasks, None, 1000, &cfg);
            let fallbacks = r.records.iter().filter(|x| x.rerank_fallback).count();
            println!("{label:<22} SR {:>5.1}  GC {:>5.1}  fallbacks {fallbacks}", r.sr, r.gc);
        }
    }
}
