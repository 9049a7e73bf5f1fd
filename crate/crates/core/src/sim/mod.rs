//! Deterministic household-task simulator: object/attribute world, skill
//! API, hidden precondition rules, goal scoring and demonstration noise.

mod catalog;
mod exec;
mod noise;
mod script;
mod task;
mod world;

pub use catalog::{Catalog, CatalogError};
pub use exec::{condition_holds, execute, execute_reviewed, ExecOptions, ExecutionTrace, Halt, Outcome, Review, Runner, TraceEntry};
pub use noise::{expert_actions, generate_noisy_demo, NoiseProfile};
pub use script::{ReferenceScript, ScriptLine};
pub use task::{EpisodeScore, Goal, ObjectSpec, Split, TaskSpec, ENGINE_RULES};
pub use world::{household_api, step, traits, AgentState, FailureCode, StepFailure, StepResult, Traits, WorldState, AGENT_ID, ATTRIBUTES};

use crate::model::Action;
use crate::prompt::parse_action_program;

/// The task's expert program, with guards, as actions.
pub fn reference_program(task: &TaskSpec) -> Vec<Action> {
    parse_action_program(&task.reference.expert(), &household_api())
        .map(|p| p.actions)
        .unwrap_or_default()
}

/// Splits the expert action sequence at `prefix_len` for forecasting: the
/// observed prefix and the remaining actions to predict.
pub fn forecast_split(task: &TaskSpec, seed: u64, prefix_len: usize) -> (Vec<Action>, Vec<Action>) {
    let mut all = expert_actions(task, seed);
    let rest = all.split_off(prefix_len.min(all.len()));
    (all, rest)
}
