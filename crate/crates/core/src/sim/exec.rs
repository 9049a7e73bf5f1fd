//! Executes action programs (including guarded blocks) against the world.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::world::{step, StepFailure, WorldState};
use crate::model::{Action, Condition, Observation, Trajectory, TrajectoryKind, TrajectorySource};

/// Decision taken before an action runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Review {
    Proceed,
    Reject(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Failed { failure: StepFailure },
    /// Inside a guarded block whose condition was false.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub index: usize,
    pub action: Action,
    pub outcome: Outcome,
    pub state_after: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Halt {
    Completed,
    Stopped { index: usize },
    Failed { index: usize, failure: StepFailure },
    Rejected { index: usize, text: String },
    StepCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub initial: WorldState,
    pub entries: Vec<TraceEntry>,
    pub final_state: WorldState,
    pub halt: Halt,
}

impl ExecutionTrace {
    /// Actions that were attempted (successful or failed, not skipped).
    pub fn steps_used(&self) -> usize {
        self.entries.iter().filter(|e| !matches!(e.outcome, Outcome::Skipped)).count()
    }

    pub fn executed_actions(&self) -> Vec<&Action> {
        self.entries.iter().filter(|e| matches!(e.outcome, Outcome::Ok)).map(|e| &e.action).collect()
    }

    /// Trajectory with one observation before each traced action plus the
    /// final one. Every element named in an action is flagged as interacted.
    pub fn to_trajectory(&self, kind: TrajectoryKind, source: TrajectorySource) -> Trajectory {
        let touched: BTreeSet<String> =
            self.entries.iter().flat_map(|e| e.action.arguments.iter().cloned()).collect();
        let mut observations = vec![self.initial.observe(0, &touched)];
        for (i, e) in self.entries.iter().enumerate() {
            let mut o: Observation = e.state_after.observe(i as u32 + 1, &touched);
            if let Outcome::Failed { failure } = &e.outcome {
                o.action_failure = Some(failure.message.clone());
            }
            observations.push(o);
        }
        Trajectory {
            observations,
            actions: self.entries.iter().map(|e| e.action.clone()).collect(),
            kind,
            source,
        }
    }
}

pub fn condition_holds(state: &WorldState, c: &Condition) -> bool {
    match state.get(&c.element).and_then(|e| e.attributes.get(&c.attribute)) {
        Some(v) => v == &c.value,
        None => c.value == crate::model::AttrValue::Bool(false),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub max_steps: usize,
    /// Stop at the first failed action (verification and deployment) or keep
    /// going (replaying noisy demonstrations).
    pub halt_on_failure: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { max_steps: 60, halt_on_failure: true }
    }
}

pub fn execute(initial: &WorldState, program: &[Action], opts: ExecOptions) -> ExecutionTrace {
    execute_reviewed(initial, program, opts, |_, _, _| Review::Proceed)
}

/// Runs `program`, asking `review` before every action that would execute.
pub fn execute_reviewed(
    initial: &WorldState,
    program: &[Action],
    opts: ExecOptions,
    mut review: impl FnMut(usize, &Action, &WorldState) -> Review,
) -> ExecutionTrace {
    let mut r = Runner::new(initial.clone(), program.to_vec(), opts);
    while let Some((index, action)) = r.next_action().map(|(i, a)| (i, a.clone())) {
        if let Review::Reject(text) = review(index, &action, r.state()) {
            r.reject(text);
            break;
        }
        r.run_next();
    }
    r.finish()
}

/// Incremental program execution, one action at a time. A guarded block
/// (maximal run of consecutive actions with equal guards) is evaluated once,
/// against the state at its first action.
#[derive(Debug, Clone)]
pub struct Runner {
    initial: WorldState,
    program: Vec<Action>,
    opts: ExecOptions,
    state: WorldState,
    entries: Vec<TraceEntry>,
    next: usize,
    used: usize,
    block_active: Option<bool>,
    halt: Option<Halt>,
}

impl Runner {
    pub fn new(initial: WorldState, program: Vec<Action>, opts: ExecOptions) -> Self {
        Self {
            state: initial.clone(),
            initial,
            program,
            opts,
            entries: Vec::new(),
            next: 0,
            used: 0,
            block_active: None,
            halt: None,
        }
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn halt(&self) -> Option<&Halt> {
        self.halt.as_ref()
    }

    pub fn steps_used(&self) -> usize {
        self.used
    }

    /// The next action that would execute, skipping inactive guarded
    /// actions. `None` once the run has halted.
    pub fn next_action(&mut self) -> Option<(usize, &Action)> {
        loop {
            if self.halt.is_some() {
                return None;
            }
            let index = self.next;
            let Some(action) = self.program.get(index) else {
                self.halt = Some(Halt::Completed);
                return None;
            };
            let starts_block = match (&action.guard, index.checked_sub(1).map(|p| &self.program[p].guard)) {
                (Some(g), Some(Some(prev))) => g != prev,
                (Some(_), _) => true,
                (None, _) => false,
            };
            match &action.guard {
                None => self.block_active = None,
                Some(g) if starts_block => self.block_active = Some(condition_holds(&self.state, g)),
                Some(_) => {}
            }
            if self.block_active == Some(false) {
                self.entries.push(TraceEntry {
                    index,
                    action: action.clone(),
                    outcome: Outcome::Skipped,
                    state_after: self.state.clone(),
                });
                self.next += 1;
                continue;
            }
            if self.used >= self.opts.max_steps {
                self.halt = Some(Halt::StepCap);
                return None;
            }
            return Some((index, &self.program[index]));
        }
    }

    /// Stops before the pending action.
    pub fn reject(&mut self, text: String) {
        if self.halt.is_none() {
            self.halt = Some(Halt::Rejected { index: self.next, text });
        }
    }

    /// Executes the pending action, if any, and returns its trace entry.
    pub fn run_next(&mut self) -> Option<&TraceEntry> {
        let (index, action) = self.next_action().map(|(i, a)| (i, a.clone()))?;
        self.used += 1;
        self.next += 1;
        let r = step(&self.state, &action);
        self.state = r.new_state;
        let outcome = match r.failure_reason {
            None => {
                if action.skill == "stop" {
                    self.halt = Some(Halt::Stopped { index });
                }
                Outcome::Ok
            }
            Some(failure) => {
                if self.opts.halt_on_failure {
                    self.halt = Some(Halt::Failed { index, failure: failure.clone() });
                }
                Outcome::Failed { failure }
            }
        };
        self.entries.push(TraceEntry { index, action, outcome, state_after: self.state.clone() });
        self.entries.last()
    }

    pub fn finish(mut self) -> ExecutionTrace {
        let halt = self.halt.take().unwrap_or(Halt::Completed);
        ExecutionTrace { initial: self.initial, entries: self.entries, final_state: self.state, halt }
    }
}
