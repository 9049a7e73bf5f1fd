mod common;

use std::sync::Arc;

use common::*;
use ical::backend::{Backend, BackendError, Completion, Embedder, GenParams, HashEmbedder, ScriptedBackend};
use ical::deploy::{evaluate_suite, run_episode, DeployConfig, ExecMode, RerankConfig};
use ical::engine::Engine;
use ical::hitl::{HitlConfig, ScriptedOracle};
use ical::memory::MemoryStore;
use ical::pipeline::{generate_demos, learn, raw_demo_memory, LearnConfig};
use ical::prompt::{render_program, PromptBundle, TemplateId};
use ical::sim::{expert_actions, Catalog, NoiseProfile, Split, TaskSpec};
use parking_lot::Mutex;

/// Records the user text of every prompt and forwards to a scripted backend.
struct Capture {
    inner: ScriptedBackend,
    prompts: Mutex<Vec<(TemplateId, String)>>,
}

impl Capture {
    fn new(inner: ScriptedBackend) -> Arc<Self> {
        Arc::new(Self { inner, prompts: Mutex::new(Vec::new()) })
    }

    fn count(&self, t: TemplateId) -> usize {
        self.prompts.lock().iter().filter(|(x, _)| *x == t).count()
    }
}

impl Backend for Capture {
    fn id(&self) -> &str {
        "capture"
    }
    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        self.prompts.lock().push((prompt.template_id, prompt.user_text.clone()));
        self.inner.complete(prompt, params)
    }
}

fn engine_on(backend: Arc<dyn Backend>, memory: Option<Arc<MemoryStore>>) -> Engine {
    let embedder = Arc::new(HashEmbedder::default());
    let memory = memory.unwrap_or_else(|| Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim())));
    Engine::new(backend, embedder, memory)
}

fn program_reply(program: &str) -> String {
    format!("Summary: scripted.\nPredicted Actions:\n```python\n{program}```\n")
}

fn task(catalog: &Catalog) -> TaskSpec {
    catalog.interleaved(Split::Unseen, 1)[0].clone()
}

fn reference(task: &TaskSpec, seed: u64) -> String {
    render_program(&expert_actions(task, seed), &[])
}

const BROKEN: &str = "go_to(Nowhere_99)\npickup(Nowhere_99)\n";

fn raw_memory(catalog: &Catalog, n: usize) -> Arc<MemoryStore> {
    let demos = generate_demos(catalog, Split::Seen, n, 1, NoiseProfile::none());
    let e = engine_on(Arc::new(ScriptedBackend::new()), None);
    Arc::new(raw_demo_memory(&e, catalog, &demos).unwrap())
}

#[test]
fn scripted_reference_program_succeeds() {
    let catalog = catalog();
    let t = task(&catalog);
    let backend = Capture::new(ScriptedBackend::new().then(TemplateId::Deployment, program_reply(&reference(&t, 5))));
    let rec = run_episode(&engine_on(backend.clone(), None), &t, 5, &DeployConfig::default());
    assert!(rec.score.success, "{rec:?}");
    assert_eq!(rec.score.goal_fraction, 1.0);
    assert_eq!(rec.repairs, 0);
    assert_eq!(rec.retrieved_ids, vec![Vec::<String>::new()]);
    assert_eq!(backend.count(TemplateId::Deployment), 1);
}

#[test]
fn failing_program_is_repaired_once() {
    let catalog = catalog();
    let t = task(&catalog);
    let backend = Capture::new(
        ScriptedBackend::new()
            .then(TemplateId::Deployment, program_reply(BROKEN))
            .then(TemplateId::Deployment, program_reply(&reference(&t, 5))),
    );
    let rec = run_episode(&engine_on(backend.clone(), None), &t, 5, &DeployConfig::default());
    assert!(rec.score.success);
    assert_eq!(rec.repairs, 1);
    let prompts = backend.prompts.lock();
    assert_eq!(prompts.len(), 2);
    assert!(prompts[1].1.contains("go_to(Nowhere_99) failed"), "{}", prompts[1].1);
    assert!(prompts[1].1.contains("pickup(Nowhere_99)"));
    assert!(!prompts[0].1.contains("failed"));
}

#[test]
fn repairs_stop_at_the_limit() {
    let catalog = catalog();
    let t = task(&catalog);
    let mut s = ScriptedBackend::new();
    for _ in 0..4 {
        s = s.then(TemplateId::Deployment, program_reply(BROKEN));
    }
    let backend = Capture::new(s);
    let cfg = DeployConfig { max_repairs: 2, ..DeployConfig::default() };
    let rec = run_episode(&engine_on(backend.clone(), None), &t, 5, &cfg);
    assert!(!rec.score.success);
    assert_eq!(rec.repairs, 2);
    assert_eq!(backend.count(TemplateId::Deployment), 3);
    assert!(rec.halt.starts_with("failed"));
}

#[test]
fn step_loop_with_one_step() {
    let catalog = catalog();
    let t = task(&catalog);
    let first = expert_actions(&t, 5)[0].call_text();
    let backend = Capture::new(ScriptedBackend::new().then(TemplateId::Deployment, format!("Predicted Actions: ```{first}```")));
    let cfg = DeployConfig { mode: ExecMode::StepLoop, max_steps: 1, ..DeployConfig::default() };
    let rec = run_episode(&engine_on(backend.clone(), None), &t, 5, &cfg);
    assert_eq!(rec.score.steps_used, 1);
    assert_eq!(rec.actions_taken, vec![first]);
    assert_eq!(rec.halt, "step_cap");
    assert_eq!(backend.count(TemplateId::Deployment), 1);
}

#[test]
fn step_loop_follows_the_reference_to_success() {
    let catalog = catalog();
    let t = task(&catalog);
    let mut s = ScriptedBackend::new();
    for a in expert_actions(&t, 5) {
        s = s.then(TemplateId::Deployment, format!("Predicted Actions: ```{}```", a.call_text()));
    }
    s = s.then(TemplateId::Deployment, "Predicted Actions: ```stop()```");
    let cfg = DeployConfig { mode: ExecMode::StepLoop, ..DeployConfig::default() };
    let rec = run_episode(&engine_on(Arc::new(s), None), &t, 5, &cfg);
    assert!(rec.score.success);
    assert_eq!(rec.halt, "stopped");
}

#[test]
fn rerank_executes_the_chosen_candidate() {
    let catalog = catalog();
    let t = task(&catalog);
    let good = reference(&t, 5);
    let backend = Capture::new(
        ScriptedBackend::new()
            .then(TemplateId::Deployment, program_reply(BROKEN))
            .then(TemplateId::Deployment, program_reply(&good))
            .then(TemplateId::Deployment, program_reply("go_to(Elsewhere_1)\n"))
            .then(TemplateId::SelfEval, "Choice: 2\nJustification: the second one reaches every goal."),
    );
    let memory = raw_memory(&catalog, 9);
    let cfg = DeployConfig { rerank: Some(RerankConfig { num_candidates: 3, slice_size: Some(3) }), ..DeployConfig::default() };
    let rec = run_episode(&engine_on(backend.clone(), Some(memory)), &t, 5, &cfg);
    assert_eq!(rec.chosen_candidate, Some(1));
    assert!(!rec.rerank_fallback);
    assert!(rec.score.success);
    let want: Vec<String> = expert_actions(&t, 5).iter().map(|a| a.call_text()).collect();
    assert_eq!(rec.actions_taken, want);
    // Three disjoint slices of three examples each.
    assert_eq!(rec.retrieved_ids.len(), 3);
    let all: std::collections::BTreeSet<&String> = rec.retrieved_ids.iter().flatten().collect();
    assert_eq!(all.len(), 9);
    let prompts = backend.prompts.lock();
    let eval = &prompts.iter().find(|(t, _)| *t == TemplateId::SelfEval).unwrap().1;
    assert!(eval.contains("Nowhere_99") && eval.contains("Elsewhere_1"));
}

#[test]
fn rerank_with_a_small_memory_still_generates_every_candidate() {
    let catalog = catalog();
    let t = task(&catalog);
    let good = reference(&t, 5);
    let backend = Capture::new(
        ScriptedBackend::new()
            .then(TemplateId::Deployment, program_reply(&good))
            .then(TemplateId::Deployment, program_reply(BROKEN))
            .then(TemplateId::Deployment, program_reply(BROKEN))
            .then(TemplateId::SelfEval, "Choice: 1"),
    );
    let cfg = DeployConfig { rerank: Some(RerankConfig { num_candidates: 3, slice_size: Some(5) }), ..DeployConfig::default() };
    let rec = run_episode(&engine_on(backend.clone(), Some(raw_memory(&catalog, 2))), &t, 5, &cfg);
    assert_eq!(backend.count(TemplateId::Deployment), 3);
    assert_eq!(backend.count(TemplateId::SelfEval), 1);
    assert_eq!(rec.retrieved_ids.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 0, 0]);
    assert_eq!(rec.chosen_candidate, Some(0));
    assert!(rec.score.success);
}

#[test]
fn unusable_self_evaluation_falls_back_to_the_first_candidate() {
    let catalog = catalog();
    let t = task(&catalog);
    let mut s = ScriptedBackend::new()
        .then(TemplateId::Deployment, program_reply(&reference(&t, 5)))
        .then(TemplateId::Deployment, program_reply(BROKEN));
    for _ in 0..3 {
        s = s.then(TemplateId::SelfEval, "Choice: 7");
    }
    let cfg = DeployConfig { rerank: Some(RerankConfig { num_candidates: 2, slice_size: None }), ..DeployConfig::default() };
    let rec = run_episode(&engine_on(Arc::new(s), None), &t, 5, &cfg);
    assert_eq!(rec.chosen_candidate, Some(0));
    assert!(rec.rerank_fallback);
    assert!(rec.score.success);
}

#[test]
fn backend_failure_marks_the_episode_errored() {
    let catalog = catalog();
    let t = task(&catalog);
    let s = ScriptedBackend::new().then_error(TemplateId::Deployment, BackendError::Auth("bad key".into()));
    let report = evaluate_suite(&engine_on(Arc::new(s), None), "x", &[t], None, 5, &DeployConfig::default());
    assert_eq!((report.episodes, report.errored), (0, 1));
    assert_eq!(report.records[0].halt, "errored");
    assert!(report.records[0].error.as_deref().unwrap().contains("bad key"));
}

fn learned_engine(catalog: &Arc<Catalog>) -> Engine {
    let engine = rules_engine(catalog);
    let demos = generate_demos(catalog, Split::Seen, 12, 7, NoiseProfile::typical());
    let cfg = LearnConfig { hitl: HitlConfig::default(), ..LearnConfig::default() };
    learn(&engine, catalog, &demos, &cfg, &mut ScriptedOracle);
    engine
}

#[test]
fn single_candidate_rerank_equals_the_plain_path() {
    let catalog = catalog();
    let engine = learned_engine(&catalog);
    let tasks: Vec<TaskSpec> = catalog.interleaved(Split::Unseen, 12).into_iter().cloned().collect();
    for mode in [ExecMode::ProgramOnce, ExecMode::StepLoop] {
        let plain = DeployConfig { mode, ..DeployConfig::default() };
        let one = DeployConfig { rerank: Some(RerankConfig { num_candidates: 1, slice_size: Some(2) }), ..plain };
        let a = evaluate_suite(&engine, "x", &tasks, None, 3, &plain);
        let b = evaluate_suite(&engine, "x", &tasks, None, 3, &one);
        assert_eq!(a, b, "{mode:?}");
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    let catalog = catalog();
    let tasks: Vec<TaskSpec> = catalog.interleaved(Split::Unseen, 12).into_iter().cloned().collect();
    let run = || {
        let engine = learned_engine(&catalog);
        let cfg = DeployConfig { rerank: Some(RerankConfig::default()), ..DeployConfig::default() };
        evaluate_suite(&engine, "x", &tasks, Some(Split::Unseen), 11, &cfg).to_json()
    };
    assert_eq!(run(), run());
}
