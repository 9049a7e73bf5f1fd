//! Verification with feedback: execute the optimized program, pause on
//! failure (or on a reviewer's rejection), revise from the feedback, reset
//! and replay, and store the example once it succeeds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{abstracted_state, read_draft, relabel, AbstractionOutcome};
use crate::engine::{CallError, CallRecord, Engine};
use crate::memory::RetrievalQuery;
use crate::model::{
    AbstractionSet, Action, Example, ExampleStatus, Instruction, RevisionRecord, Trajectory, TrajectoryKind,
    TrajectorySource,
};
use crate::prompt::{render_program, Section, TemplateId};
use crate::sim::{EpisodeScore, ExecOptions, Halt, Outcome, Review, Runner, TaskSpec, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSourceKind {
    HumanUi,
    ScriptedOracle,
    Cli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub step_index: u32,
    /// The action that failed or was rejected; absent when the program ran to
    /// the end without reaching the goal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_action: Option<Action>,
    pub observation_digest: String,
    pub text: String,
    pub source: FeedbackSourceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HitlConfig {
    pub n_feedbacks_max: usize,
    pub step_cap: usize,
    /// Ask the feedback source to approve every action before it runs.
    pub review_each_step: bool,
    /// On exhaustion, store the best partial attempt under a new instruction.
    pub relabel: bool,
    pub k: usize,
    /// Stamp revisions with wall-clock seconds instead of the round number.
    pub wall_clock: bool,
}

impl Default for HitlConfig {
    fn default() -> Self {
        Self { n_feedbacks_max: 5, step_cap: 60, review_each_step: false, relabel: false, k: 5, wall_clock: false }
    }
}

/// What the session needs before it can continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pending {
    Review { event_id: u64, index: usize, action: Action, state: String },
    Feedback { event_id: u64, request: FeedbackRequest },
}

impl Pending {
    pub fn event_id(&self) -> u64 {
        match self {
            Pending::Review { event_id, .. } | Pending::Feedback { event_id, .. } => *event_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub step_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_action: Option<Action>,
    /// The environment's failure sentence, if an action failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Hints for goal conditions that do not hold at the end of the attempt.
    #[serde(default)]
    pub unmet_goals: Vec<String>,
    pub state: String,
}

impl FeedbackRequest {
    /// What a scripted observer would say: the failure sentence, else the
    /// first unmet-goal hint.
    pub fn oracle_text(&self) -> Option<String> {
        self.failure.clone().or_else(|| self.unmet_goals.first().cloned())
    }
}

/// Source of reviews and feedback for [`run_hitl`].
pub trait FeedbackSource {
    fn kind(&self) -> FeedbackSourceKind;
    fn review(&mut self, _index: usize, _action: &Action, _state: &str) -> Review {
        Review::Proceed
    }
    /// `None` abandons the session.
    fn feedback(&mut self, request: &FeedbackRequest) -> Option<String>;
}

/// Answers every request with the environment's own failure sentence or
/// goal hint.
#[derive(Debug, Default, Clone)]
pub struct ScriptedOracle;

impl FeedbackSource for ScriptedOracle {
    fn kind(&self) -> FeedbackSourceKind {
        FeedbackSourceKind::ScriptedOracle
    }
    fn feedback(&mut self, request: &FeedbackRequest) -> Option<String> {
        request.oracle_text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingReview,
    AwaitingFeedback,
    Accepted,
    Exhausted,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Accepted | SessionStatus::Exhausted | SessionStatus::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Started { attempt: usize, program: String },
    StepExecuted { attempt: usize, index: usize, action: String, ok: bool, failure: Option<String> },
    AwaitingReview { event_id: u64, index: usize, action: String },
    AwaitingFeedback { event_id: u64, request: FeedbackRequest },
    FeedbackReceived { event_id: u64, text: String, source: FeedbackSourceKind },
    Revised { round: usize, program: String, new_comments: Vec<String>, explanation: String },
    RevisionFailed { round: usize, reason: String },
    Accepted { example_id: String },
    Exhausted { relabeled: Option<String> },
    Aborted { cause: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub program: Vec<Action>,
    pub trajectory: Trajectory,
    pub score: EpisodeScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitlOutcome {
    pub status: SessionStatus,
    pub final_example: Option<Example>,
    pub relabeled: Option<Example>,
    pub attempts: Vec<Attempt>,
    pub feedback_rounds: usize,
    pub abort_cause: Option<String>,
    pub transcript: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("session is not waiting for input")]
    NotAwaiting,
    #[error("event {given} is not the pending event {pending}")]
    WrongEvent { given: u64, pending: u64 },
    #[error("session is waiting for {expected}, not {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("feedback text must not be empty")]
    EmptyFeedback,
}

enum Phase {
    Executing(Box<Runner>),
    AwaitReview { runner: Box<Runner>, pending: Pending },
    AwaitFeedback { pending: Pending },
    Done,
}

fn state_digest(s: &WorldState) -> String {
    hex::encode(Sha256::digest(s.render().as_bytes()))
}

/// One verification session as a resumable state machine. Drive it with
/// [`HitlSession::pump`], answer [`Pending`] requests with
/// [`HitlSession::submit_review`] / [`HitlSession::submit_feedback`].
pub struct HitlSession {
    engine: Engine,
    id: String,
    instruction: Instruction,
    task: TaskSpec,
    seed: u64,
    cfg: HitlConfig,
    demo: Trajectory,
    program: Vec<Action>,
    abstractions: AbstractionSet,
    attempts: Vec<Attempt>,
    final_states: Vec<WorldState>,
    lineage: Vec<RevisionRecord>,
    rounds: usize,
    status: SessionStatus,
    phase: Phase,
    events: Vec<SessionEvent>,
    next_event: u64,
    final_example: Option<Example>,
    relabeled: Option<Example>,
    abort_cause: Option<String>,
    transcript: Vec<CallRecord>,
}

impl HitlSession {
    /// Starts a session for `draft`. `demo` is the noisy demonstration the
    /// draft came from; its observations ground the abstracted state.
    pub fn new(
        engine: Engine,
        id: impl Into<String>,
        draft: &AbstractionOutcome,
        demo: &Trajectory,
        task: &TaskSpec,
        seed: u64,
        cfg: HitlConfig,
    ) -> Self {
        let mut s = Self {
            engine,
            id: id.into(),
            instruction: draft.instruction.clone(),
            task: task.clone(),
            seed,
            cfg,
            demo: demo.clone(),
            program: draft.optimized.actions.clone(),
            abstractions: draft.abstractions.clone(),
            attempts: Vec::new(),
            final_states: Vec::new(),
            lineage: Vec::new(),
            rounds: 0,
            status: SessionStatus::Running,
            phase: Phase::Done,
            events: Vec::new(),
            next_event: 1,
            final_example: None,
            relabeled: None,
            abort_cause: None,
            transcript: draft.transcript.clone(),
        };
        s.start_attempt();
        s
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn task_id(&self) -> &str {
        &self.task.task_id
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn program(&self) -> &[Action] {
        &self.program
    }

    pub fn program_text(&self) -> String {
        render_program(&self.program, &self.abstractions.state_changes)
    }

    pub fn abstractions(&self) -> &AbstractionSet {
        &self.abstractions
    }

    pub fn attempts(&self) -> &[Attempt] {
        &self.attempts
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn feedback_rounds(&self) -> usize {
        self.rounds
    }

    pub fn lineage(&self) -> &[RevisionRecord] {
        &self.lineage
    }

    /// The live world state of the attempt in progress.
    pub fn current_state(&self) -> Option<&WorldState> {
        match &self.phase {
            Phase::Executing(r) | Phase::AwaitReview { runner: r, .. } => Some(r.state()),
            _ => None,
        }
    }

    /// Steps executed so far in the attempt in progress.
    pub fn current_steps(&self) -> Vec<(usize, String, bool, Option<String>)> {
        match &self.phase {
            Phase::Executing(r) | Phase::AwaitReview { runner: r, .. } => r
                .entries()
                .iter()
                .filter(|e| e.outcome != Outcome::Skipped)
                .map(|e| {
                    let failure = match &e.outcome {
                        Outcome::Failed { failure } => Some(failure.message.clone()),
                        _ => None,
                    };
                    (e.index, e.action.call_text(), failure.is_none(), failure)
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn pending(&self) -> Option<&Pending> {
        match &self.phase {
            Phase::AwaitReview { pending, .. } | Phase::AwaitFeedback { pending, .. } => Some(pending),
            _ => None,
        }
    }

    fn event_id(&mut self) -> u64 {
        let id = self.next_event;
        self.next_event += 1;
        id
    }

    fn start_attempt(&mut self) {
        let opts = ExecOptions { max_steps: self.cfg.step_cap, halt_on_failure: true };
        let runner = Runner::new(self.task.reset(self.seed), self.program.clone(), opts);
        self.events.push(SessionEvent::Started { attempt: self.attempts.len() + 1, program: self.program_text() });
        self.phase = Phase::Executing(Box::new(runner));
        self.status = SessionStatus::Running;
    }

    /// Runs until the session needs input or ends.
    pub fn pump(&mut self) -> SessionStatus {
        loop {
            match std::mem::replace(&mut self.phase, Phase::Done) {
                Phase::Executing(mut runner) => {
                    let next = runner.next_action().map(|(i, a)| (i, a.clone()));
                    match next {
                        Some((index, action)) if self.cfg.review_each_step => {
                            let event_id = self.event_id();
                            let state = runner.state().render();
                            self.events.push(SessionEvent::AwaitingReview { event_id, index, action: action.call_text() });
                            self.phase = Phase::AwaitReview {
                                runner,
                                pending: Pending::Review { event_id, index, action, state },
                            };
                            self.status = SessionStatus::AwaitingReview;
                            return self.status;
                        }
                        Some(_) => {
                            self.step(&mut runner);
                            self.phase = Phase::Executing(runner);
                        }
                        None => self.finish_attempt(*runner, None),
                    }
                }
                phase @ (Phase::AwaitReview { .. } | Phase::AwaitFeedback { .. }) => {
                    self.phase = phase;
                    return self.status;
                }
                Phase::Done => return self.status,
            }
            if self.status.is_terminal() {
                return self.status;
            }
        }
    }

    fn step(&mut self, runner: &mut Runner) {
        let attempt = self.attempts.len() + 1;
        if let Some(e) = runner.run_next() {
            let failure = match &e.outcome {
                Outcome::Failed { failure } => Some(failure.message.clone()),
                _ => None,
            };
            self.events.push(SessionEvent::StepExecuted {
                attempt,
                index: e.index,
                action: e.action.call_text(),
                ok: failure.is_none(),
                failure,
            });
        }
    }

    /// Scores the finished attempt and decides what happens next. A
    /// rejection arrives with its feedback already attached.
    fn finish_attempt(&mut self, runner: Runner, rejection: Option<FeedbackEvent>) {
        let trace = runner.finish();
        let score = self.task.score(&trace.final_state, trace.steps_used());
        let trajectory = trace.to_trajectory(TrajectoryKind::Optimized, TrajectorySource::AgentRollout);
        self.attempts.push(Attempt { program: self.program.clone(), trajectory, score, feedback: None });
        self.final_states.push(trace.final_state.clone());
        if score.success && rejection.is_none() {
            self.accept();
            return;
        }
        if self.rounds >= self.cfg.n_feedbacks_max {
            self.exhaust();
            return;
        }
        if let Some(fb) = rejection {
            self.apply_feedback(fb);
            return;
        }
        let (step_index, failed_action, failure) = match &trace.halt {
            Halt::Failed { index, failure } => (*index as u32, self.program.get(*index).cloned(), Some(failure.message.clone())),
            _ => (trace.entries.last().map_or(0, |e| e.index as u32 + 1), None, None),
        };
        let request = FeedbackRequest {
            step_index,
            failed_action,
            failure,
            unmet_goals: self.task.unmet_goals(&trace.final_state).iter().map(|g| g.feedback()).collect(),
            state: trace.final_state.render(),
        };
        let event_id = self.event_id();
        self.events.push(SessionEvent::AwaitingFeedback { event_id, request: request.clone() });
        self.phase = Phase::AwaitFeedback { pending: Pending::Feedback { event_id, request } };
        self.status = SessionStatus::AwaitingFeedback;
    }

    pub fn submit_review(&mut self, event_id: u64, review: Review, source: FeedbackSourceKind) -> Result<(), SessionError> {
        match &self.phase {
            Phase::AwaitReview { pending, .. } if pending.event_id() != event_id => {
                return Err(SessionError::WrongEvent { given: event_id, pending: pending.event_id() })
            }
            Phase::AwaitReview { .. } => {}
            Phase::AwaitFeedback { .. } => return Err(SessionError::WrongKind { expected: "feedback", got: "review" }),
            _ => return Err(SessionError::NotAwaiting),
        }
        if let Review::Reject(text) = &review {
            if text.trim().is_empty() {
                return Err(SessionError::EmptyFeedback);
            }
        }
        let Phase::AwaitReview { mut runner, pending } = std::mem::replace(&mut self.phase, Phase::Done) else {
            unreachable!("checked above")
        };
        self.status = SessionStatus::Running;
        match review {
            Review::Proceed => {
                self.step(&mut runner);
                self.phase = Phase::Executing(runner);
            }
            Review::Reject(text) => {
                let Pending::Review { index, action, .. } = pending else { unreachable!("review phase") };
                self.events.push(SessionEvent::FeedbackReceived { event_id, text: text.clone(), source });
                let fb = FeedbackEvent {
                    step_index: index as u32,
                    failed_action: Some(action),
                    observation_digest: state_digest(runner.state()),
                    text: text.clone(),
                    source,
                };
                runner.reject(text);
                self.finish_attempt(*runner, Some(fb));
            }
        }
        Ok(())
    }

    pub fn submit_feedback(&mut self, event_id: u64, text: &str, source: FeedbackSourceKind) -> Result<(), SessionError> {
        match &self.phase {
            Phase::AwaitFeedback { pending, .. } if pending.event_id() != event_id => {
                return Err(SessionError::WrongEvent { given: event_id, pending: pending.event_id() })
            }
            Phase::AwaitFeedback { .. } => {}
            Phase::AwaitReview { .. } => return Err(SessionError::WrongKind { expected: "review", got: "feedback" }),
            _ => return Err(SessionError::NotAwaiting),
        }
        if text.trim().is_empty() {
            return Err(SessionError::EmptyFeedback);
        }
        let Phase::AwaitFeedback { pending: Pending::Feedback { request, .. } } =
            std::mem::replace(&mut self.phase, Phase::Done)
        else {
            unreachable!("checked above")
        };
        self.events.push(SessionEvent::FeedbackReceived { event_id, text: text.to_string(), source });
        let fb = FeedbackEvent {
            step_index: request.step_index,
            failed_action: request.failed_action,
            observation_digest: self.final_states.last().map(state_digest).unwrap_or_default(),
            text: text.trim().to_string(),
            source,
        };
        self.apply_feedback(fb);
        Ok(())
    }

    /// Gives up on the session from outside.
    pub fn abort(&mut self, cause: impl Into<String>) {
        if self.status.is_terminal() {
            return;
        }
        let cause = cause.into();
        self.events.push(SessionEvent::Aborted { cause: cause.clone() });
        self.abort_cause = Some(cause);
        self.status = SessionStatus::Aborted;
        self.phase = Phase::Done;
    }

    fn apply_feedback(&mut self, fb: FeedbackEvent) {
        if let Some(last) = self.attempts.last_mut() {
            last.feedback = Some(fb.clone());
        }
        self.rounds += 1;
        let round = self.rounds;
        match self.revise(&fb) {
            Ok(rev) => {
                self.events.push(SessionEvent::Revised {
                    round,
                    program: render_program(&rev.program, &rev.abstractions.state_changes),
                    new_comments: rev.new_comments.clone(),
                    explanation: rev.explanation.clone(),
                });
                self.lineage.push(RevisionRecord {
                    step_index: fb.step_index,
                    feedback: fb.text.clone(),
                    timestamp: self.timestamp(round),
                    correction_comments: rev.correction_comments,
                });
                self.program = rev.program;
                self.abstractions = rev.abstractions;
            }
            Err(CallError::Unparseable { reason, .. }) => {
                self.events.push(SessionEvent::RevisionFailed { round, reason });
                self.lineage.push(RevisionRecord {
                    step_index: fb.step_index,
                    feedback: fb.text.clone(),
                    timestamp: self.timestamp(round),
                    correction_comments: Vec::new(),
                });
            }
            Err(e) => {
                self.abort(format!("revision failed: {e}"));
                return;
            }
        }
        self.start_attempt();
    }

    fn timestamp(&self, round: usize) -> u64 {
        if self.cfg.wall_clock {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
        } else {
            round as u64
        }
    }

    fn revise(&mut self, fb: &FeedbackEvent) -> Result<Revision, CallError> {
        let state = self.task.reset(self.seed).render();
        let examples = self
            .engine
            .retrieve_examples(&RetrievalQuery::new(self.instruction.text.clone(), Some(state.clone())), self.cfg.k);
        let mut ctx = self.engine.context();
        ctx.instruction = Some(self.instruction.text.clone());
        ctx.textual_state = Some(state);
        ctx.program = Some(self.program_text());
        ctx.plan = self.abstractions.plan_steps.clone();
        ctx.comments = self.abstractions.causal_comments.clone();
        ctx.failed_action = fb.failed_action.as_ref().map(Action::call_text);
        ctx.feedback = Some(fb.text.clone());
        ctx.examples = examples;
        let engine = self.engine.clone();
        let mut log = Vec::new();
        let result = engine.call(TemplateId::HitlRevision, &ctx, &mut log, |r| {
            let draft = read_draft(&engine, r)?;
            Ok((draft, r.items(Section::CorrectionAbstraction), r.text(Section::Explain).unwrap_or_default()))
        });
        self.transcript.extend(log);
        let (draft, corrections, explanation) = result?;
        revise_abstractions(&self.demo, &self.abstractions, draft, corrections, explanation)
    }

    fn accept(&mut self) {
        let last = self.attempts.last().expect("accepted attempt");
        let example = Example {
            example_id: self.id.clone(),
            instruction: self.instruction.clone(),
            trajectory: last.trajectory.clone(),
            abstractions: self.abstractions.clone(),
            embeddings: None,
            lineage: self.lineage.clone(),
            status: ExampleStatus::Accepted,
        };
        match self.engine.memory.add(example, self.engine.embedder.as_ref()) {
            Ok(stored) => {
                self.events.push(SessionEvent::Accepted { example_id: stored.example_id.clone() });
                self.final_example = Some((*stored).clone());
                self.status = SessionStatus::Accepted;
                self.phase = Phase::Done;
            }
            Err(e) => self.abort(format!("could not store example: {e}")),
        }
    }

    fn exhaust(&mut self) {
        let mut relabeled = None;
        if self.cfg.relabel {
            let best = self
                .attempts
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| a.score.goal_fraction.total_cmp(&b.score.goal_fraction).then(j.cmp(i)))
                .map(|(i, _)| i);
            if let Some(i) = best.filter(|&i| {
                let g = self.attempts[i].score.goal_fraction;
                g > 0.0 && g < 1.0
            }) {
                let attempt = self.attempts[i].clone();
                let achieved: Vec<String> = self.task.met_goals(&self.final_states[i]).iter().map(|g| g.describe()).collect();
                let mut log = Vec::new();
                let result = relabel(
                    &self.engine,
                    &format!("{}-relabeled", self.id),
                    &self.instruction,
                    &attempt.trajectory,
                    &attempt.score,
                    &achieved,
                    &self.abstractions,
                    &mut log,
                );
                self.transcript.extend(log);
                match result {
                    Ok(ex) => match self.engine.memory.add(ex, self.engine.embedder.as_ref()) {
                        Ok(stored) => relabeled = Some((*stored).clone()),
                        Err(e) => tracing::warn!("relabeled example not stored: {e}"),
                    },
                    Err(e) => tracing::warn!("relabeling {} failed: {e}", self.id),
                }
            }
        }
        self.events.push(SessionEvent::Exhausted { relabeled: relabeled.as_ref().map(|e: &Example| e.example_id.clone()) });
        self.relabeled = relabeled;
        self.status = SessionStatus::Exhausted;
        self.phase = Phase::Done;
    }

    pub fn outcome(&self) -> HitlOutcome {
        HitlOutcome {
            status: self.status,
            final_example: self.final_example.clone(),
            relabeled: self.relabeled.clone(),
            attempts: self.attempts.clone(),
            feedback_rounds: self.rounds,
            abort_cause: self.abort_cause.clone(),
            transcript: self.transcript.clone(),
        }
    }
}

struct Revision {
    program: Vec<Action>,
    abstractions: AbstractionSet,
    correction_comments: Vec<String>,
    new_comments: Vec<String>,
    explanation: String,
}

/// Applies a revision reply to the current abstractions. Comments are only
/// ever appended: correction comments first, then any comment from the
/// reply's full list that is not already present.
fn revise_abstractions(
    demo: &Trajectory,
    current: &AbstractionSet,
    draft: crate::abstraction::Draft,
    corrections: Vec<String>,
    explanation: String,
) -> Result<Revision, CallError> {
    let mut next = current.clone();
    let mut new_comments = Vec::new();
    let known: BTreeSet<String> = current.causal_comments.iter().cloned().collect();
    for c in corrections.iter().chain(draft.comments.iter()) {
        if !known.contains(c) && !new_comments.contains(c) {
            new_comments.push(c.clone());
        }
    }
    next.causal_comments.extend(new_comments.iter().cloned());
    if let Some(s) = draft.summary {
        next.summary = s;
    }
    if !draft.plan.is_empty() {
        next.plan_steps = draft.plan;
    }
    if draft.predicted.is_some() {
        next.predicted_next_state = draft.predicted;
    }
    next.state_changes = draft.state_changes;
    let mut warnings = Vec::new();
    let mut items: Vec<String> =
        current.abstracted_state.iter().map(|e| format!("{}: {}", e.element_id, e.description)).collect();
    items.extend(draft.state_items);
    let suggested: BTreeSet<String> =
        current.abstracted_state.iter().filter(|e| e.vlm_suggested).map(|e| e.element_id.clone()).collect();
    next.abstracted_state = abstracted_state(demo, &items, &draft.actions, &mut warnings);
    for e in &mut next.abstracted_state {
        if suggested.contains(&e.element_id) {
            e.vlm_suggested = true;
        }
    }
    for w in warnings {
        tracing::debug!("{w}");
    }
    Ok(Revision { program: draft.actions, abstractions: next, correction_comments: corrections, new_comments, explanation })
}

/// Runs a session to completion against a feedback source.
pub fn run_hitl(
    engine: &Engine,
    id: &str,
    draft: &AbstractionOutcome,
    demo: &Trajectory,
    task: &TaskSpec,
    seed: u64,
    cfg: HitlConfig,
    source: &mut dyn FeedbackSource,
) -> HitlOutcome {
    let mut s = HitlSession::new(engine.clone(), id, draft, demo, task, seed, cfg);
    loop {
        let status = s.pump();
        if status.is_terminal() {
            return s.outcome();
        }
        let Some(pending) = s.pending().cloned() else { return s.outcome() };
        let result = match pending {
            Pending::Review { event_id, index, action, state } => {
                let review = source.review(index, &action, &state);
                s.submit_review(event_id, review, source.kind())
            }
            Pending::Feedback { event_id, request } => match source.feedback(&request) {
                Some(text) => s.submit_feedback(event_id, &text, source.kind()),
                None => {
                    s.abort("feedback source gave no feedback");
                    Ok(())
                }
            },
        };
        if let Err(e) = result {
            s.abort(format!("feedback rejected: {e}"));
        }
    }
}
