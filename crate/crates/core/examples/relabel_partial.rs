//! Learns under feedback that never names a cause, so some sessions run out
//! of rounds, and compares runs with and without relabeling partial
//! attempts.

use std::sync::Arc;

use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::deploy::{evaluate_suite, DeployConfig};
use ical::engine::Engine;
use ical::hitl::{FeedbackRequest, FeedbackSource, FeedbackSourceKind, HitlConfig};
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, learn, LearnConfig};
use ical::sim::{Catalog, NoiseProfile, Split};

struct Vague;

impl FeedbackSource for Vague {
    fn kind(&self) -> FeedbackSourceKind {
        FeedbackSourceKind::Cli
    }
    fn feedback(&mut self, _: &FeedbackRequest) -> Option<String> {
        Some("not quite, try again".into())
    }
}

fn main() {
    let catalog = Arc::new(Catalog::builtin());
    let demos = generate_demos(&catalog, Split::Seen, 36, 7, NoiseProfile::typical());
    let tasks: Vec<_> = catalog.interleaved(Split::Unseen, 50).into_iter().cloned().collect();
    for relabel in [false, true] {
        let embedder = Arc::new(HashEmbedder::default());
        let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
        let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory);
        let cfg = LearnConfig { hitl: HitlConfig { n_feedbacks_max: 1, relabel, ..HitlConfig::default() }, ..LearnConfig::default() };
        let summary = learn(&engine, &catalog, &demos, &cfg, &mut Vague);
        println!("relabel {relabel}: {} examples stored", engine.memory.len());
        print!("{}", summary.table());
        let report = evaluate_suite(&engine, if relabel { "relabel" } else { "no-relabel" }, &tasks, None, 1000, &DeployConfig::default());
        print!("{}", report.table());
    }
}
