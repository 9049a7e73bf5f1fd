//! Abstracts one noisy demonstration and prints what came out: the cleaned
//! program, the edits that produced it and the annotations.

use std::sync::Arc;

use ical::abstraction::{abstract_demo, AbstractionConfig};
use ical::backend::{Embedder, HashEmbedder, RuleMock};
use ical::engine::Engine;
use ical::memory::MemoryStore;
use ical::pipeline::instruction_for;
use ical::prompt::render_program;
use ical::sim::{generate_noisy_demo, Catalog, NoiseProfile, Split};

fn main() {
    let catalog = Arc::new(Catalog::builtin());
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory);

    let task = catalog.interleaved(Split::Seen, 3)[2];
    let demo = generate_noisy_demo(task, 11, NoiseProfile::typical());
    println!("{}: {}", task.task_id, task.instruction_text);
    println!("noisy demo, {} actions:", demo.actions.len());
    print!("{}", render_program(&demo.actions, &[]));

    let out = abstract_demo(&engine, &instruction_for(task), &demo, &AbstractionConfig::default()).expect("abstraction");
    let e = out.edits;
    println!("\noptimized, {} actions ({} inserted, {} deleted, {} substituted):", out.optimized.actions.len(), e.insertions, e.deletions, e.substitutions);
    print!("{}", render_program(&out.optimized.actions, &out.abstractions.state_changes));
    println!("\nsummary: {}", out.abstractions.summary);
    for c in &out.abstractions.causal_comments {
        println!("comment: {c}");
    }
    for s in &out.abstractions.abstracted_state {
        println!("state: {}: {}", s.element_id, s.description);
    }
}
