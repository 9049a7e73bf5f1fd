//! Deployment: retrieve stored examples, prompt for a program or the next
//! action, execute it and score the result. Suite evaluation aggregates
//! episodes into success-rate and goal-condition tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::engine::{CallError, CallRecord, Engine};
use crate::memory::{Hit, RetrievalQuery, RetrievalWeights};
use crate::model::{Action, Example};
use crate::prompt::{parse_action_program, render_program, DeployMode, Section, TemplateId};
use crate::sim::{condition_holds, execute, step, EpisodeScore, ExecOptions, Halt, Outcome, Split, TaskSpec, WorldState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Generate one whole program and run it, re-prompting with the
    /// execution error when it fails.
    #[default]
    ProgramOnce,
    /// Retrieve and generate again before every action.
    StepLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub num_candidates: usize,
    /// Examples per candidate; defaults to the deployment `k`.
    pub slice_size: Option<usize>,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { num_candidates: 3, slice_size: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeployConfig {
    pub k: usize,
    pub max_steps: usize,
    pub weights: RetrievalWeights,
    pub mode: ExecMode,
    pub rerank: Option<RerankConfig>,
    pub max_repairs: usize,
    /// Step mode gives up after this many failed actions in a row.
    pub max_consecutive_failures: usize,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_steps: 60,
            weights: RetrievalWeights::default(),
            mode: ExecMode::ProgramOnce,
            rerank: None,
            max_repairs: 2,
            max_consecutive_failures: 3,
        }
    }
}

impl DeployConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        if let Some(r) = &self.rerank {
            if r.num_candidates == 0 {
                return Err("rerank.num_candidates must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub family: String,
    pub split: Split,
    pub seed: u64,
    pub actions_taken: Vec<String>,
    pub score: EpisodeScore,
    /// Example ids placed in each prompt, one entry per generation.
    pub retrieved_ids: Vec<Vec<String>>,
    pub repairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_candidate: Option<usize>,
    /// Self-evaluation failed and the first candidate was used.
    #[serde(default)]
    pub rerank_fallback: bool,
    pub halt: String,
    /// Set when the backend failed; such episodes are left out of averages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub transcript: Vec<CallRecord>,
}

impl EpisodeRecord {
    fn new(task: &TaskSpec, seed: u64) -> Self {
        Self {
            task_id: task.task_id.clone(),
            family: task.family.clone(),
            split: task.split,
            seed,
            actions_taken: Vec::new(),
            score: EpisodeScore { success: false, goal_fraction: 0.0, steps_used: 0, reward: 0.0 },
            retrieved_ids: Vec::new(),
            repairs: 0,
            chosen_candidate: None,
            rerank_fallback: false,
            halt: String::new(),
            error: None,
            transcript: Vec::new(),
        }
    }

    pub fn errored(&self) -> bool {
        self.error.is_some()
    }
}

struct Generation {
    actions: Vec<Action>,
    text: String,
    examples: Vec<Arc<Example>>,
}

fn query(engine: &Engine, task: &TaskSpec, state: &WorldState) -> crate::memory::Query {
    RetrievalQuery::new(task.instruction_text.clone(), Some(state.render())).embed(engine.embedder.as_ref())
}

fn hits_to_examples(hits: Vec<Hit>) -> Vec<Arc<Example>> {
    hits.into_iter().map(|h| h.example).collect()
}

/// Prompts for a program (or single action) with `examples`. An unusable
/// reply after all regenerations yields an empty program.
fn generate(
    engine: &Engine,
    task: &TaskSpec,
    state: &WorldState,
    examples: Vec<Arc<Example>>,
    mode: DeployMode,
    history: &[Action],
    repair: Option<(&str, &str)>,
    log: &mut Vec<CallRecord>,
) -> Result<Generation, BackendError> {
    let mut ctx = engine.context();
    ctx.instruction = Some(task.instruction_text.clone());
    ctx.textual_state = Some(state.render());
    ctx.examples = examples.clone();
    ctx.mode = mode;
    ctx.history = history.to_vec();
    if let Some((program, error)) = repair {
        ctx.previous_program = Some(program.to_string());
        ctx.execution_error = Some(error.to_string());
    }
    let result = engine.call(TemplateId::Deployment, &ctx, log, |r| {
        let text = r.program_text().ok_or("no predicted actions")?;
        let parsed = parse_action_program(&text, &engine.api).map_err(|e| e.to_string())?;
        Ok((parsed.actions, text))
    });
    match result {
        Ok((actions, text)) => Ok(Generation { actions, text, examples }),
        Err(CallError::Backend(e)) => Err(e),
        Err(e) => {
            tracing::debug!("{}: {e}", task.task_id);
            Ok(Generation { actions: Vec::new(), text: String::new(), examples })
        }
    }
}

/// One generation, with candidate re-ranking when configured.
fn propose(
    engine: &Engine,
    task: &TaskSpec,
    state: &WorldState,
    cfg: &DeployConfig,
    mode: DeployMode,
    history: &[Action],
    rec: &mut EpisodeRecord,
) -> Result<Generation, BackendError> {
    let q = query(engine, task, state);
    let n = cfg.rerank.map_or(1, |r| r.num_candidates.max(1));
    if n == 1 {
        let examples = hits_to_examples(engine.memory.retrieve_topk(&q, cfg.k, &cfg.weights));
        let g = generate(engine, task, state, examples, mode, history, None, &mut rec.transcript)?;
        rec.retrieved_ids.push(g.examples.iter().map(|e| e.example_id.clone()).collect());
        return Ok(g);
    }
    let slice = cfg.rerank.and_then(|r| r.slice_size).unwrap_or(cfg.k);
    let mut candidates = Vec::with_capacity(n);
    for c in 0..n {
        let examples = hits_to_examples(engine.memory.retrieve_slice(&q, c, slice, &cfg.weights));
        candidates.push(generate(engine, task, state, examples, mode, history, None, &mut rec.transcript)?);
    }
    let mut ctx = engine.context();
    ctx.instruction = Some(task.instruction_text.clone());
    ctx.textual_state = Some(state.render());
    ctx.candidates = candidates.iter().map(|g| render_program(&g.actions, &[])).collect();
    let choice = engine.call(TemplateId::SelfEval, &ctx, &mut rec.transcript, |r| {
        let text = r.text(Section::Choice).unwrap_or_default();
        let digits: String = text.chars().skip_while(|c| !c.is_ascii_digit()).take_while(char::is_ascii_digit).collect();
        match digits.parse::<usize>() {
            Ok(i) if (1..=n).contains(&i) => Ok(i - 1),
            _ => Err(format!("choice {text:?} is not a candidate number")),
        }
    });
    let chosen = match choice {
        Ok(i) => i,
        Err(CallError::Backend(e)) => return Err(e),
        Err(e) => {
            tracing::debug!("{}: self-evaluation unusable, using the first candidate: {e}", task.task_id);
            rec.rerank_fallback = true;
            0
        }
    };
    rec.chosen_candidate = Some(chosen);
    for g in &candidates {
        rec.retrieved_ids.push(g.examples.iter().map(|e| e.example_id.clone()).collect());
    }
    Ok(candidates.swap_remove(chosen))
}

fn halt_name(h: &Halt) -> String {
    match h {
        Halt::Completed => "completed".into(),
        Halt::Stopped { .. } => "stopped".into(),
        Halt::Failed { failure, .. } => format!("failed: {}", failure.message),
        Halt::Rejected { .. } => "rejected".into(),
        Halt::StepCap => "step_cap".into(),
    }
}

/// Runs one task from `task.reset(seed)` and scores the final state.
pub fn run_episode(engine: &Engine, task: &TaskSpec, seed: u64, cfg: &DeployConfig) -> EpisodeRecord {
    let mut rec = EpisodeRecord::new(task, seed);
    let result = match cfg.mode {
        ExecMode::ProgramOnce => program_once(engine, task, seed, cfg, &mut rec),
        ExecMode::StepLoop => step_loop(engine, task, seed, cfg, &mut rec),
    };
    if let Err(e) = result {
        rec.error = Some(e.to_string());
        rec.halt = "errored".into();
    }
    rec
}

fn program_once(
    engine: &Engine,
    task: &TaskSpec,
    seed: u64,
    cfg: &DeployConfig,
    rec: &mut EpisodeRecord,
) -> Result<(), BackendError> {
    let initial = task.reset(seed);
    let opts = ExecOptions { max_steps: cfg.max_steps, halt_on_failure: true };
    let mut g = propose(engine, task, &initial, cfg, DeployMode::Program, &[], rec)?;
    loop {
        // Every attempt, repaired or not, replays from the initial state.
        let trace = execute(&initial, &g.actions, opts);
        rec.actions_taken =
            trace.entries.iter().filter(|e| e.outcome != Outcome::Skipped).map(|e| e.action.call_text()).collect();
        rec.score = task.score(&trace.final_state, trace.steps_used());
        rec.halt = halt_name(&trace.halt);
        let Halt::Failed { index, failure } = &trace.halt else { return Ok(()) };
        if rec.score.success || rec.repairs >= cfg.max_repairs {
            return Ok(());
        }
        rec.repairs += 1;
        let error = format!("{} failed: {}", g.actions[*index].call_text(), failure.message);
        let previous = if g.text.is_empty() { render_program(&g.actions, &[]) } else { g.text.clone() };
        let examples = g.examples.clone();
        g = generate(engine, task, &initial, examples, DeployMode::Program, &[], Some((&previous, &error)), &mut rec.transcript)?;
        rec.retrieved_ids.push(g.examples.iter().map(|e| e.example_id.clone()).collect());
    }
}

fn step_loop(
    engine: &Engine,
    task: &TaskSpec,
    seed: u64,
    cfg: &DeployConfig,
    rec: &mut EpisodeRecord,
) -> Result<(), BackendError> {
    let mut state = task.reset(seed);
    let mut history: Vec<Action> = Vec::new();
    let mut failures = 0;
    rec.halt = "step_cap".into();
    while history.len() < cfg.max_steps {
        let g = propose(engine, task, &state, cfg, DeployMode::Step, &history, rec)?;
        let Some(action) = g.actions.into_iter().next() else {
            rec.halt = "no_action".into();
            break;
        };
        if action.skill == "stop" {
            rec.halt = "stopped".into();
            break;
        }
        let runs = action.guard.as_ref().is_none_or(|c| condition_holds(&state, c));
        if runs {
            let r = step(&state, &action);
            state = r.new_state;
            if r.ok {
                failures = 0;
            } else {
                failures += 1;
            }
        }
        history.push(action);
        if failures >= cfg.max_consecutive_failures {
            rec.halt = "repeated_failures".into();
            break;
        }
    }
    rec.actions_taken = history.iter().map(Action::call_text).collect();
    rec.score = task.score(&state, history.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub family: String,
    pub episodes: usize,
    pub sr: f64,
    pub gc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Scored episodes (errored ones excluded).
    pub episodes: usize,
    pub errored: usize,
    /// Success rate, percent.
    pub sr: f64,
    /// Mean goal-condition fraction, percent.
    pub gc: f64,
    pub families: Vec<FamilyRow>,
    pub records: Vec<EpisodeRecord>,
}

fn percent(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n, if n == 0 { 0.0 } else { 100.0 * sum / n as f64 })
}

impl SuiteReport {
    pub fn from_records(label: impl Into<String>, split: Option<Split>, records: Vec<EpisodeRecord>) -> Self {
        let scored = || records.iter().filter(|r| !r.errored());
        let (episodes, sr) = percent(scored().map(|r| if r.score.success { 1.0 } else { 0.0 }));
        let (_, gc) = percent(scored().map(|r| r.score.goal_fraction));
        let mut by_family: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
        for r in scored() {
            by_family.entry(&r.family).or_default().push(r);
        }
        let families = by_family
            .into_iter()
            .map(|(family, rs)| {
                let (episodes, sr) = percent(rs.iter().map(|r| if r.score.success { 1.0 } else { 0.0 }));
                let (_, gc) = percent(rs.iter().map(|r| r.score.goal_fraction));
                FamilyRow { family: family.to_string(), episodes, sr, gc }
            })
            .collect();
        let errored = records.len() - episodes;
        Self { label: label.into(), split, episodes, errored, sr, gc, families, records }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one row per family and a total row.
    pub fn table(&self) -> String {
        let width = self.families.iter().map(|f| f.family.len()).max().unwrap_or(0).max(self.label.len()).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>6}  {:>6}", "family", "episodes", "SR", "GC");
        for f in &self.families {
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>6.1}  {:>6.1}", f.family, f.episodes, f.sr, f.gc);
        }
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>6.1}  {:>6.1}", self.label, self.episodes, self.sr, self.gc);
        if self.errored > 0 {
            let _ = writeln!(out, "({} errored episodes excluded)", self.errored);
        }
        out
    }

    /// One CSV row per episode.
    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["task_id", "family", "split", "seed", "success", "goal_fraction", "steps_used", "repairs", "halt", "error"]);
        for r in &self.records {
            let split = match r.split {
                Split::Seen => "seen",
                Split::Unseen => "unseen",
            };
            let _ = w.write_record([
                r.task_id.as_str(),
                &r.family,
                split,
                &r.seed.to_string(),
                &r.score.success.to_string(),
                &r.score.goal_fraction.to_string(),
                &r.score.steps_used.to_string(),
                &r.repairs.to_string(),
                &r.halt,
                r.error.as_deref().unwrap_or(""),
            ]);
        }
        String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
    }
}

/// Runs every task of `split` (all tasks when `None`) with `seed`.
pub fn evaluate_suite(
    engine: &Engine,
    label: &str,
    tasks: &[TaskSpec],
    split: Option<Split>,
    seed: u64,
    cfg: &DeployConfig,
) -> SuiteReport {
    let records = tasks
        .iter()
        .filter(|t| split.is_none_or(|s| t.split == s))
        .map(|t| run_episode(engine, t, seed, cfg))
        .collect();
    SuiteReport::from_records(label, split, records)
}
