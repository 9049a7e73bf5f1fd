//! Sessions opened from queued demonstrations and answered over the API.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use ical::abstraction::abstract_demo;
use ical::engine::Engine;
use ical::hitl::{FeedbackSourceKind, HitlSession, Pending, SessionError, SessionStatus};
use ical::memory::RetrievalQuery;
use ical::model::{Example, ExampleStatus, RevisionRecord};
use ical::pipeline::{instruction_for, DemoRecord, LearnConfig};
use ical::prompt::render_program;
use ical::sim::{Catalog, Review};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::events::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub event_id: u64,
    pub decision: Decision,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("no session {0}")]
    UnknownSession(String),
    #[error("event {0} was already answered")]
    AlreadyAnswered(u64),
    #[error("event {given} is not pending; the session waits on event {pending}")]
    Stale { given: u64, pending: u64 },
    #[error("session is not waiting for input")]
    NotAwaiting,
    #[error("a rejection needs feedback text")]
    EmptyFeedback,
}

impl From<SessionError> for SubmitError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotAwaiting => SubmitError::NotAwaiting,
            SessionError::WrongEvent { given, pending } => SubmitError::Stale { given, pending },
            SessionError::WrongKind { .. } => SubmitError::NotAwaiting,
            SessionError::EmptyFeedback => SubmitError::EmptyFeedback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session_id: String,
    pub task_id: String,
    pub instruction: String,
    pub status: SessionStatus,
    pub pending_event: Option<u64>,
    pub attempts: usize,
    pub feedback_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    pub action: String,
    pub ok: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub row: SessionRow,
    pub max_feedback_rounds: usize,
    pub pending: Option<Pending>,
    pub program: String,
    pub steps: Vec<StepView>,
    pub state: Option<String>,
    pub causal_comments: Vec<String>,
    pub lineage: Vec<RevisionRecord>,
    pub example_id: Option<String>,
    pub abort_cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffLine {
    /// `equal`, `insert` or `delete`.
    pub tag: String,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramDiff {
    pub from: String,
    pub to: String,
    pub lines: Vec<DiffLine>,
    pub unified: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub example_id: String,
    pub instruction: String,
    pub status: ExampleStatus,
    pub actions: usize,
    pub causal_comments: usize,
    pub revisions: usize,
}

impl ExampleRow {
    fn of(e: &Example) -> Self {
        Self {
            example_id: e.example_id.clone(),
            instruction: e.instruction.text.clone(),
            status: e.status,
            actions: e.trajectory.actions.len(),
            causal_comments: e.abstractions.causal_comments.len(),
            revisions: e.lineage.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    #[serde(flatten)]
    pub example: ExampleRow,
    pub score: f64,
    pub s_instruction: f64,
    pub s_textual: f64,
    pub s_visual: f64,
}

struct Slot {
    session: HitlSession,
    published: usize,
    answered: HashSet<u64>,
}

pub struct SessionManager {
    engine: Engine,
    catalog: Arc<Catalog>,
    cfg: LearnConfig,
    events: Arc<EventLog>,
    sessions: RwLock<Vec<(String, Arc<Mutex<Slot>>)>>,
    queue: Mutex<VecDeque<DemoRecord>>,
    /// Sessions waiting on a reviewer; guards refills.
    active: Mutex<usize>,
    concurrent: usize,
}

impl SessionManager {
    /// Queues `demos`; call [`SessionManager::fill`] to open sessions.
    /// At most `concurrent` sessions wait on a reviewer at once, so later
    /// demos can retrieve what earlier ones stored.
    pub fn new(
        engine: Engine,
        catalog: Arc<Catalog>,
        cfg: LearnConfig,
        demos: Vec<DemoRecord>,
        concurrent: usize,
        events: Arc<EventLog>,
    ) -> Self {
        Self {
            engine,
            catalog,
            cfg,
            events,
            sessions: RwLock::new(Vec::new()),
            queue: Mutex::new(demos.into()),
            active: Mutex::new(0),
            concurrent: concurrent.max(1),
        }
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn queued(&self) -> usize {
        self.queue.lock().len()
    }

    /// Opens sessions from the queue until `concurrent` of them await input.
    /// Sessions that finish without input are kept for inspection. Blocks on
    /// model calls.
    pub fn fill(&self) {
        let mut active = self.active.lock();
        while *active < self.concurrent {
            let Some(d) = self.queue.lock().pop_front() else { break };
            let Ok(task) = self.catalog.get(&d.task_id) else {
                tracing::warn!("demo names unknown task {}", d.task_id);
                continue;
            };
            let id = d.example_id();
            if self.engine.memory.get(&id).is_some() || self.slot(&id).is_some() {
                continue;
            }
            let draft = match abstract_demo(&self.engine, &instruction_for(task), &d.trajectory, &self.cfg.abstraction) {
                Ok(o) => o,
                Err(e) => {
                    tracing::warn!("{id}: {e}");
                    continue;
                }
            };
            let mut session = HitlSession::new(self.engine.clone(), id.clone(), &draft, &d.trajectory, task, d.seed, self.cfg.hitl);
            let status = session.pump();
            let mut slot = Slot { session, published: 0, answered: HashSet::new() };
            self.publish(&mut slot);
            self.sessions.write().push((id, Arc::new(Mutex::new(slot))));
            if !status.is_terminal() {
                *active += 1;
            }
        }
    }

    fn publish(&self, slot: &mut Slot) {
        let id = slot.session.id().to_string();
        for e in &slot.session.events()[slot.published..] {
            self.events.publish(&id, e.clone());
        }
        slot.published = slot.session.events().len();
    }

    fn slot(&self, id: &str) -> Option<Arc<Mutex<Slot>>> {
        self.sessions.read().iter().find(|(s, _)| s == id).map(|(_, slot)| slot.clone())
    }

    pub fn list(&self) -> Vec<SessionRow> {
        let slots: Vec<_> = self.sessions.read().iter().map(|(_, s)| s.clone()).collect();
        slots.iter().map(|s| row(&s.lock().session)).collect()
    }

    pub fn get(&self, id: &str) -> Option<SessionView> {
        self.slot(id).map(|s| view(&s.lock().session, self.cfg.hitl.n_feedbacks_max))
    }

    /// Answers the pending event of session `id`. The first answer to an
    /// event wins; any later one is refused.
    pub fn submit(&self, id: &str, sub: &Submission) -> Result<SessionView, SubmitError> {
        let slot = self.slot(id).ok_or_else(|| SubmitError::UnknownSession(id.to_string()))?;
        let mut g = slot.lock();
        if g.answered.contains(&sub.event_id) {
            return Err(SubmitError::AlreadyAnswered(sub.event_id));
        }
        let pending = g.session.pending().cloned().ok_or(SubmitError::NotAwaiting)?;
        if pending.event_id() != sub.event_id {
            return Err(SubmitError::Stale { given: sub.event_id, pending: pending.event_id() });
        }
        let text = sub.text.as_deref().map(str::trim).filter(|t| !t.is_empty()).map(str::to_string);
        let kind = FeedbackSourceKind::HumanUi;
        match (pending, sub.decision) {
            (Pending::Review { .. }, Decision::Accept) => g.session.submit_review(sub.event_id, Review::Proceed, kind)?,
            (Pending::Review { .. }, Decision::Reject) => {
                let text = text.ok_or(SubmitError::EmptyFeedback)?;
                g.session.submit_review(sub.event_id, Review::Reject(text), kind)?
            }
            (Pending::Feedback { request, .. }, Decision::Accept) => {
                let text = request.oracle_text().ok_or(SubmitError::EmptyFeedback)?;
                g.session.submit_feedback(sub.event_id, &text, kind)?
            }
            (Pending::Feedback { .. }, Decision::Reject) => {
                let text = text.ok_or(SubmitError::EmptyFeedback)?;
                g.session.submit_feedback(sub.event_id, &text, kind)?
            }
        }
        g.answered.insert(sub.event_id);
        let status = g.session.pump();
        self.publish(&mut g);
        let out = view(&g.session, self.cfg.hitl.n_feedbacks_max);
        drop(g);
        if status.is_terminal() {
            self.retire();
        }
        Ok(out)
    }

    /// Ends session `id` without storing anything.
    pub fn abort(&self, id: &str, cause: &str) -> Result<SessionView, SubmitError> {
        let slot = self.slot(id).ok_or_else(|| SubmitError::UnknownSession(id.to_string()))?;
        let mut g = slot.lock();
        if g.session.status().is_terminal() {
            return Err(SubmitError::NotAwaiting);
        }
        g.session.abort(cause);
        self.publish(&mut g);
        let out = view(&g.session, self.cfg.hitl.n_feedbacks_max);
        drop(g);
        self.retire();
        Ok(out)
    }

    fn retire(&self) {
        {
            let mut active = self.active.lock();
            *active = active.saturating_sub(1);
        }
        self.fill();
    }

    /// Line diff between the last two distinct programs of session `id`.
    pub fn diff(&self, id: &str) -> Option<ProgramDiff> {
        let slot = self.slot(id)?;
        let g = slot.lock();
        let s = &g.session;
        let mut programs: Vec<(String, String)> = Vec::new();
        let versions = s.attempts().iter().enumerate().map(|(i, a)| (format!("attempt {}", i + 1), render_program(&a.program, &[])));
        for (label, text) in versions.chain([("current".to_string(), render_program(s.program(), &[]))]) {
            if programs.last().is_none_or(|(_, t)| *t != text) {
                programs.push((label, text));
            } else if let Some(last) = programs.last_mut() {
                last.0 = label;
            }
        }
        let (to_label, to) = programs.pop().unwrap_or_default();
        let (from_label, from) = programs.pop().unwrap_or_else(|| (to_label.clone(), to.clone()));
        let d = similar::TextDiff::from_lines(&from, &to);
        let lines = d
            .iter_all_changes()
            .map(|c| DiffLine {
                tag: match c.tag() {
                    similar::ChangeTag::Equal => "equal",
                    similar::ChangeTag::Insert => "insert",
                    similar::ChangeTag::Delete => "delete",
                }
                .into(),
                line: c.value().trim_end_matches('\n').to_string(),
            })
            .collect();
        let unified = d.unified_diff().header(&from_label, &to_label).to_string();
        Some(ProgramDiff { from: from_label, to: to_label, lines, unified })
    }

    pub fn memory_list(&self) -> Vec<ExampleRow> {
        self.engine.memory.examples().iter().map(|e| ExampleRow::of(e)).collect()
    }

    /// A stored example without its embedding vectors.
    pub fn memory_get(&self, id: &str) -> Option<Example> {
        self.engine.memory.get(id).map(|e| Example { embeddings: None, ..(*e).clone() })
    }

    pub fn memory_search(&self, query: &str, k: usize) -> Vec<SearchHit> {
        self.engine
            .retrieve(&RetrievalQuery::new(query, None), k)
            .into_iter()
            .map(|h| SearchHit {
                example: ExampleRow::of(&h.example),
                score: h.score,
                s_instruction: h.s_instruction,
                s_textual: h.s_textual,
                s_visual: h.s_visual,
            })
            .collect()
    }
}

fn row(s: &HitlSession) -> SessionRow {
    SessionRow {
        session_id: s.id().to_string(),
        task_id: s.task_id().to_string(),
        instruction: s.instruction().text.clone(),
        status: s.status(),
        pending_event: s.pending().map(Pending::event_id),
        attempts: s.attempts().len(),
        feedback_rounds: s.feedback_rounds(),
    }
}

fn view(s: &HitlSession, max_rounds: usize) -> SessionView {
    let out = s.outcome();
    SessionView {
        row: row(s),
        max_feedback_rounds: max_rounds,
        pending: s.pending().cloned(),
        program: s.program_text(),
        steps: s
            .current_steps()
            .into_iter()
            .map(|(index, action, ok, failure)| StepView { index, action, ok, failure })
            .collect(),
        state: s.current_state().map(|w| w.render()),
        causal_comments: s.abstractions().causal_comments.clone(),
        lineage: s.lineage().to_vec(),
        example_id: out.final_example.or(out.relabeled).map(|e| e.example_id),
        abort_cause: out.abort_cause,
    }
}
