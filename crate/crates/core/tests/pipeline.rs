mod common;

use std::io::Write;
use std::sync::Arc;

use common::*;
use ical::backend::{Backend, BackendError, Completion, Embedder, GenParams, HashEmbedder, RuleMock};
use ical::deploy::DeployConfig;
use ical::engine::Engine;
use ical::hitl::ScriptedOracle;
use ical::memory::MemoryStore;
use ical::model::ExampleStatus;
use ical::pipeline::{generate_demos, learn, raw_demo_memory, read_demos, sweep, write_demos, DemoRecord, LearnConfig};
use ical::prompt::{PromptBundle, TemplateId};
use ical::sim::{NoiseProfile, Split};

/// Refuses abstraction prompts that mention `needle`.
struct FilterOn<B> {
    inner: B,
    needle: String,
}

impl<B: Backend> Backend for FilterOn<B> {
    fn id(&self) -> &str {
        "filter"
    }
    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        if prompt.template_id == TemplateId::Abstraction && prompt.user_text.contains(&self.needle) {
            return Err(BackendError::ContentFiltered);
        }
        self.inner.complete(prompt, params)
    }
}

#[test]
fn twenty_demos_mostly_accepted() {
    let catalog = catalog();
    let engine = rules_engine(&catalog);
    let demos = generate_demos(&catalog, Split::Seen, 20, 7, NoiseProfile::typical());
    let s = learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    assert_eq!(s.demos, 20);
    assert!(s.accepted >= 15, "{}", s.table());
    assert_eq!(s.accepted + s.exhausted + s.skipped + s.aborted, 20);
    assert_eq!(engine.memory.len(), s.accepted + s.relabeled);
    assert_eq!(s.families.iter().map(|f| f.demos).sum::<usize>(), 20);
    assert!(s.table().contains("accepted"));
}

#[test]
fn no_demos_gives_an_empty_summary() {
    let catalog = catalog();
    let engine = rules_engine(&catalog);
    let s = learn(&engine, &catalog, &[], &LearnConfig::default(), &mut ScriptedOracle);
    assert_eq!((s.demos, s.accepted, s.exhausted, s.relabeled, s.skipped), (0, 0, 0, 0, 0));
    assert!(s.families.is_empty());
    assert!(engine.memory.is_empty());
}

#[test]
fn content_filtered_demo_is_skipped() {
    let catalog = catalog();
    let demos = generate_demos(&catalog, Split::Seen, 6, 7, NoiseProfile::typical());
    let target = catalog.get(&demos[2].task_id).unwrap();
    let backend = FilterOn { inner: RuleMock::new(catalog.clone()), needle: target.instruction_text.clone() };
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    let engine = Engine::new(Arc::new(backend), embedder, memory);
    let s = learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    let filtered: Vec<_> = s.sessions.iter().filter(|x| x.status == "skipped").collect();
    assert!(!filtered.is_empty());
    assert!(filtered.iter().all(|x| x.task_id == target.task_id));
    assert_eq!(s.skipped, filtered.len());
    assert_eq!(s.demos, 6);
}

#[test]
fn unreadable_and_unknown_demos_are_counted() {
    let catalog = catalog();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.jsonl");
    let mut demos = generate_demos(&catalog, Split::Seen, 4, 1, NoiseProfile::typical());
    demos.push(DemoRecord { task_id: "no_such_task".into(), ..demos[0].clone() });
    write_demos(&path, &demos).unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{{\"task_id\": 3").unwrap();
    writeln!(f).unwrap();
    drop(f);

    let (read, bad) = read_demos(&path).unwrap();
    assert_eq!(bad, 1);
    assert_eq!(read, demos);
    let engine = rules_engine(&catalog);
    let s = learn(&engine, &catalog, &read, &LearnConfig::default(), &mut ScriptedOracle);
    assert_eq!(s.demos, 4);
    assert_eq!(s.unreadable, 1);
    assert!(s.table().contains("1 unreadable"));
}

#[test]
fn learning_resumes_from_a_persisted_memory() {
    let catalog = catalog();
    let dir = tempfile::tempdir().unwrap();
    let demos = generate_demos(&catalog, Split::Seen, 8, 3, NoiseProfile::typical());
    let embedder = Arc::new(HashEmbedder::default());
    let open = || {
        let (m, _) = MemoryStore::open(dir.path(), embedder.id(), embedder.dim()).unwrap();
        Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder.clone(), Arc::new(m))
    };
    let first = learn(&open(), &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    assert!(first.accepted > 0);

    let engine = open();
    assert_eq!(engine.memory.len(), first.accepted);
    let again = learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    assert_eq!(engine.memory.len(), first.accepted);
    let already = again.sessions.iter().filter(|s| s.detail.as_deref() == Some("already stored")).count();
    assert_eq!(already, first.accepted);
    assert_eq!(again.accepted, 0);
}

#[test]
fn raw_memory_holds_every_known_demo() {
    let catalog = catalog();
    let engine = rules_engine(&catalog);
    let demos = generate_demos(&catalog, Split::Seen, 10, 1, NoiseProfile::typical());
    let raw = raw_demo_memory(&engine, &catalog, &demos).unwrap();
    assert_eq!(raw.len(), 10);
    assert!(raw.examples().iter().all(|e| e.status == ExampleStatus::RawDemo));
}

#[test]
fn demo_generation_cycles_with_fresh_seeds() {
    let catalog = catalog();
    let n = catalog.split(Split::Seen).len();
    let demos = generate_demos(&catalog, Split::Seen, n + 3, 100, NoiseProfile::none());
    assert_eq!(demos.len(), n + 3);
    assert_eq!(demos[n].task_id, demos[0].task_id);
    assert_ne!(demos[n].seed, demos[0].seed);
    assert_eq!(demos.iter().map(|d| d.seed).collect::<Vec<_>>(), (100..100 + n as u64 + 3).collect::<Vec<_>>());
}

#[test]
fn sweep_caps_sizes_at_the_memory() {
    let catalog = catalog();
    let engine = rules_engine(&catalog);
    let demos = generate_demos(&catalog, Split::Seen, 6, 7, NoiseProfile::typical());
    learn(&engine, &catalog, &demos, &LearnConfig::default(), &mut ScriptedOracle);
    let stored = engine.memory.len();
    let tasks: Vec<_> = catalog.interleaved(Split::Unseen, 6).into_iter().cloned().collect();
    let points = sweep(&engine, &tasks, None, &[0, 2, 100], 5, &DeployConfig::default());
    assert_eq!(points.iter().map(|p| p.memory_size).collect::<Vec<_>>(), vec![0, 2.min(stored), stored]);
    assert!(points[0].report.records.iter().all(|r| r.retrieved_ids.iter().all(Vec::is_empty)));
    assert_eq!(engine.memory.len(), stored, "sweeping leaves the memory untouched");
}
