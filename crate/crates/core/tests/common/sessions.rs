//! Feedback sources and the randomized session check shared by the HITL
//! and acceptance tests.

use std::sync::Arc;

use ical::abstraction::{abstract_demo, AbstractionConfig, AbstractionOutcome};
use ical::backend::{Backend, Embedder, HashEmbedder, RuleMock};
use ical::engine::Engine;
use ical::hitl::{run_hitl, FeedbackRequest, FeedbackSource, FeedbackSourceKind, HitlConfig, SessionStatus};
use ical::memory::MemoryStore;
use ical::model::{Action, Trajectory};
use ical::pipeline::instruction_for;
use ical::prompt::TemplateId;
use ical::sim::{execute, generate_noisy_demo, Catalog, ExecOptions, NoiseProfile, Review, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Flaky;

pub fn engine_with(backend: Arc<dyn Backend>) -> Engine {
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    Engine::new(backend, embedder, memory)
}

pub fn draft(engine: &Engine, task: &TaskSpec, seed: u64, noise: NoiseProfile) -> (Trajectory, AbstractionOutcome) {
    let demo = generate_noisy_demo(task, seed, noise);
    let d = abstract_demo(engine, &instruction_for(task), &demo, &AbstractionConfig::default()).unwrap();
    (demo, d)
}

/// Feedback that names no cause: the revision has nothing to learn from.
pub struct Vague;

impl FeedbackSource for Vague {
    fn kind(&self) -> FeedbackSourceKind {
        FeedbackSourceKind::Cli
    }
    fn feedback(&mut self, _: &FeedbackRequest) -> Option<String> {
        Some("that did not work, please try again".into())
    }
}

/// Mixes helpful and vague feedback, rejects proposed actions at random and
/// may walk away.
pub struct Random {
    pub rng: ChaCha8Rng,
    pub helpful: f64,
    pub reject: f64,
    pub quit: f64,
}

impl FeedbackSource for Random {
    fn kind(&self) -> FeedbackSourceKind {
        FeedbackSourceKind::HumanUi
    }
    fn review(&mut self, _: usize, action: &Action, _: &str) -> Review {
        if self.rng.random_bool(self.reject) {
            Review::Reject(format!("do not {} now", action.skill))
        } else {
            Review::Proceed
        }
    }
    fn feedback(&mut self, request: &FeedbackRequest) -> Option<String> {
        if self.rng.random_bool(self.quit) {
            return None;
        }
        if self.rng.random_bool(self.helpful) {
            request.oracle_text().or_else(|| Some("not finished".into()))
        } else {
            Some("wrong, try something else".into())
        }
    }
}

/// Replays `actions` from the task's initial state, independently of the
/// session that produced them.
pub fn replays_to_success(task: &TaskSpec, seed: u64, actions: &[Action]) -> bool {
    let trace = execute(&task.reset(seed), actions, ExecOptions::default());
    task.score(&trace.final_state, trace.steps_used()).success
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub sessions: usize,
    pub accepted: usize,
    pub exhausted: usize,
    pub aborted: usize,
    pub max_attempts_over_bound: i64,
}

/// Runs `n` sessions with random tasks, feedback budgets, revision failure
/// rates and feedback sources, checking the attempt bound, the exhaustion
/// count, the lineage length and that accepted examples replay.
pub fn random_sessions(catalog: &Arc<Catalog>, n: u64, seed: u64) -> Result<Tally, String> {
    let tasks: Vec<&TaskSpec> = catalog.tasks().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally { max_attempts_over_bound: i64::MIN, ..Tally::default() };
    for i in 0..n {
        let task = tasks[rng.random_range(0..tasks.len())];
        let budget = rng.random_range(0..=5);
        let rate = [0.0, 0.3, 0.7, 1.0][rng.random_range(0..4)];
        let backend: Arc<dyn Backend> =
            Arc::new(Flaky { inner: RuleMock::new(catalog.clone()), template: TemplateId::HitlRevision, rate, seed: i });
        let engine = engine_with(backend);
        let noise = if rng.random_bool(0.5) { NoiseProfile::typical() } else { NoiseProfile { swap: 0.3, ..NoiseProfile::typical() } };
        let (demo, d) = draft(&engine, task, i, noise);
        let cfg = HitlConfig { n_feedbacks_max: budget, review_each_step: rng.random_bool(0.2), ..HitlConfig::default() };
        let mut source = Random {
            rng: ChaCha8Rng::seed_from_u64(i ^ seed),
            helpful: rng.random_range(0.0..=1.0),
            reject: 0.05,
            quit: if rng.random_bool(0.1) { 0.3 } else { 0.0 },
        };
        let out = run_hitl(&engine, &format!("s{i}"), &d, &demo, task, i, cfg, &mut source);
        let ctx = format!("session {i} ({}, N={budget}, rate={rate})", task.task_id);
        t.sessions += 1;
        t.max_attempts_over_bound = t.max_attempts_over_bound.max(out.attempts.len() as i64 - (budget as i64 + 1));
        if out.attempts.len() > budget + 1 || out.feedback_rounds > budget {
            return Err(format!("{ctx}: {} attempts, {} rounds", out.attempts.len(), out.feedback_rounds));
        }
        match out.status {
            SessionStatus::Accepted => {
                t.accepted += 1;
                let ex = out.final_example.as_ref().ok_or(format!("{ctx}: accepted without example"))?;
                if ex.lineage.len() != out.feedback_rounds {
                    return Err(format!("{ctx}: lineage {} vs {} rounds", ex.lineage.len(), out.feedback_rounds));
                }
                if !replays_to_success(task, i, &ex.trajectory.actions) {
                    return Err(format!("{ctx}: accepted example does not replay to success"));
                }
                if engine.memory.get(&ex.example_id).is_none() {
                    return Err(format!("{ctx}: accepted example not stored"));
                }
            }
            SessionStatus::Exhausted => {
                t.exhausted += 1;
                if out.attempts.len() != budget + 1 || out.feedback_rounds != budget {
                    return Err(format!("{ctx}: exhausted after {} attempts", out.attempts.len()));
                }
                if !engine.memory.is_empty() {
                    return Err(format!("{ctx}: exhausted session stored an example"));
                }
            }
            SessionStatus::Aborted => {
                t.aborted += 1;
                if out.abort_cause.is_none() {
                    return Err(format!("{ctx}: aborted without cause"));
                }
            }
            s => return Err(format!("{ctx}: non-terminal status {s:?}")),
        }
    }
    Ok(t)
}
