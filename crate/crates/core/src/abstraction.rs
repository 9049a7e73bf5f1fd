//! Abstraction phase: a noisy demonstration becomes an optimized program with
//! language abstractions, and partial successes can be relabeled.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{CallError, CallRecord, Engine};
use crate::memory::RetrievalQuery;
use crate::model::{
    diff_action_lists, validate_trajectory, AbstractedElement, AbstractionSet, Action, EditSummary, Example,
    ExampleStatus, Instruction, Observation, StateChange, Trajectory, TrajectoryKind,
};
use crate::prompt::{parse_action_program, ParsedResponse, ProgramError, Section, TemplateId};
use crate::sim::EpisodeScore;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbstractionMode {
    /// One call over the whole demonstration.
    #[default]
    Whole,
    /// One call per window of `window` actions; the results are merged.
    PerStep { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbstractionConfig {
    pub k: usize,
    pub mode: AbstractionMode,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        Self { k: 5, mode: AbstractionMode::Whole }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionOutcome {
    pub instruction: Instruction,
    /// The optimized program over the demonstration's initial observation.
    pub optimized: Trajectory,
    pub abstractions: AbstractionSet,
    pub edits: EditSummary,
    pub warnings: Vec<String>,
    pub retrieved_ids: Vec<String>,
    pub transcript: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AbstractionError {
    #[error("demonstration is invalid: {0}")]
    InvalidDemo(String),
    #[error("abstraction failed: {0}")]
    Failed(CallError),
    #[error("response withheld by content filter")]
    ContentFiltered,
}

impl From<CallError> for AbstractionError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Backend(crate::backend::BackendError::ContentFiltered) => AbstractionError::ContentFiltered,
            other => AbstractionError::Failed(other),
        }
    }
}

/// Typed content of an abstraction or revision reply.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Draft {
    pub actions: Vec<Action>,
    pub state_changes: Vec<StateChange>,
    pub summary: Option<String>,
    pub plan: Vec<String>,
    pub comments: Vec<String>,
    pub state_items: Vec<String>,
    pub predicted: Option<String>,
}

pub(crate) fn read_draft(engine: &Engine, r: &ParsedResponse) -> Result<Draft, String> {
    let text = r.program_text().ok_or("no program section")?;
    let program = parse_action_program(&text, &engine.api).map_err(|e| match e {
        ProgramError::NoActions { errors } => match errors.first() {
            Some(l) => format!("no actions found (line {}: {})", l.line, l.reason),
            None => "no actions found".to_string(),
        },
    })?;
    Ok(Draft {
        actions: program.actions,
        state_changes: program.state_changes,
        summary: r.text(Section::Summary).filter(|s| !s.trim().is_empty()),
        plan: r.items(Section::Plan),
        comments: r.items(Section::AbstractionComments),
        state_items: r.items(Section::AbstractedState),
        predicted: r.text(Section::PredictedState),
    })
}

fn item_id(item: &str) -> Option<&str> {
    let head = item.split(':').next()?.trim().trim_matches('`').trim();
    let id = head.split_whitespace().next()?;
    (!id.is_empty()).then_some(id)
}

/// Interacted elements of the demonstration plus the elements the model
/// listed. Listed elements that were not interacted with, and action
/// arguments never observed, are marked as model-suggested with a warning
/// for the latter.
pub(crate) fn abstracted_state(
    demo: &Trajectory,
    items: &[String],
    actions: &[Action],
    warnings: &mut Vec<String>,
) -> Vec<AbstractedElement> {
    let observed = demo.observed_ids();
    let interacted: BTreeSet<&str> = demo
        .observations
        .iter()
        .flat_map(|o| o.textual_state.iter().filter(|e| e.interacted).map(|e| e.element_id.as_str()))
        .collect();
    let describe = |id: &str| {
        demo.observations.iter().find_map(|o: &Observation| o.element(id)).map(|e| e.describe()).unwrap_or_default()
    };
    let mut out: Vec<AbstractedElement> = Vec::new();
    for item in items {
        let Some(id) = item_id(item) else { continue };
        if out.iter().any(|e| e.element_id == id) {
            continue;
        }
        let description = match item.split_once(':') {
            Some((_, d)) if !d.trim().is_empty() => d.trim().to_string(),
            _ => describe(id),
        };
        if !observed.contains(id) {
            warnings.push(format!("abstracted state names {id}, which was never observed"));
        }
        out.push(AbstractedElement { element_id: id.to_string(), description, vlm_suggested: !interacted.contains(id) });
    }
    for o in &demo.observations {
        for e in o.textual_state.iter().filter(|e| e.interacted) {
            if !out.iter().any(|x| x.element_id == e.element_id) {
                out.push(AbstractedElement { element_id: e.element_id.clone(), description: e.describe(), vlm_suggested: false });
            }
        }
    }
    for a in actions {
        for arg in &a.arguments {
            if !observed.contains(arg.as_str()) && !out.iter().any(|x| &x.element_id == arg) {
                warnings.push(format!("program uses {arg}, which was never observed; kept as a suggested element"));
                out.push(AbstractedElement { element_id: arg.clone(), description: String::new(), vlm_suggested: true });
            }
        }
    }
    out
}

fn one_call(
    engine: &Engine,
    instr: &Instruction,
    demo: &Trajectory,
    examples: &[Arc<Example>],
    log: &mut Vec<CallRecord>,
) -> Result<Draft, AbstractionError> {
    let mut ctx = engine.context();
    ctx.instruction = Some(instr.text.clone());
    ctx.demonstration = Some(demo.clone());
    ctx.examples = examples.to_vec();
    ctx.image_refs = demo.observations.iter().filter_map(|o| o.image_ref.clone()).collect();
    Ok(engine.call(TemplateId::Abstraction, &ctx, log, |r| {
        let d = read_draft(engine, r)?;
        if d.summary.is_none() || d.plan.is_empty() {
            return Err("summary and step-by-step reasoning must not be empty".into());
        }
        Ok(d)
    })?)
}

fn window(demo: &Trajectory, start: usize, end: usize) -> Trajectory {
    let mut observations: Vec<Observation> = demo.observations[start..=end.min(demo.observations.len() - 1)].to_vec();
    for (i, o) in observations.iter_mut().enumerate() {
        o.step_index = i as u32;
    }
    Trajectory { observations, actions: demo.actions[start..end].to_vec(), kind: demo.kind, source: demo.source }
}

/// Turns a noisy demonstration into an optimized program and abstractions,
/// prompting with the `k` most similar stored examples.
pub fn abstract_demo(
    engine: &Engine,
    instr: &Instruction,
    noisy: &Trajectory,
    cfg: &AbstractionConfig,
) -> Result<AbstractionOutcome, AbstractionError> {
    let report = validate_trajectory(noisy, &engine.api);
    if let Some(v) = report.violations.first() {
        return Err(AbstractionError::InvalidDemo(v.to_string()));
    }
    let initial = noisy.initial_observation().ok_or_else(|| AbstractionError::InvalidDemo("no observations".into()))?;
    let query = RetrievalQuery::new(instr.text.clone(), Some(initial.render_state()));
    let examples = engine.retrieve_examples(&query, cfg.k);
    let mut transcript = Vec::new();

    let drafts: Vec<Draft> = match cfg.mode {
        AbstractionMode::PerStep { window: w } if w > 0 && noisy.actions.len() > w => {
            let mut out = Vec::new();
            let mut start = 0;
            while start < noisy.actions.len() {
                let end = (start + w).min(noisy.actions.len());
                out.push(one_call(engine, instr, &window(noisy, start, end), &examples, &mut transcript)?);
                start = end;
            }
            out
        }
        _ => vec![one_call(engine, instr, noisy, &examples, &mut transcript)?],
    };

    let mut actions = Vec::new();
    let mut sets = Vec::new();
    for d in &drafts {
        let offset = actions.len() as u32;
        let changes: Vec<StateChange> =
            d.state_changes.iter().cloned().map(|mut c| { c.step_index += offset; c }).collect();
        actions.extend(d.actions.iter().cloned());
        sets.push(AbstractionSet {
            summary: d.summary.clone().unwrap_or_default(),
            plan_steps: d.plan.clone(),
            causal_comments: d.comments.clone(),
            state_changes: changes,
            abstracted_state: Vec::new(),
            predicted_next_state: d.predicted.clone(),
        });
    }
    let mut abstractions = AbstractionSet::merge(&sets);
    let mut warnings = Vec::new();
    let items: Vec<String> = drafts.iter().flat_map(|d| d.state_items.iter().cloned()).collect();
    abstractions.abstracted_state = abstracted_state(noisy, &items, &actions, &mut warnings);

    let optimized = Trajectory {
        observations: vec![initial.clone()],
        actions: actions.clone(),
        kind: TrajectoryKind::Optimized,
        source: noisy.source,
    };
    Ok(AbstractionOutcome {
        instruction: instr.clone(),
        edits: diff_action_lists(&noisy.actions, &actions),
        optimized,
        abstractions,
        warnings,
        retrieved_ids: examples.iter().map(|e| e.example_id.clone()).collect(),
        transcript,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RelabelError {
    #[error("relabeling needs a partial success, got goal fraction {0}")]
    NotPartial(f64),
    #[error("relabeling failed: {0}")]
    Failed(#[from] CallError),
}

/// Turns a partially successful trajectory into an example for the
/// instruction it actually satisfies. `achieved` lists the goal conditions
/// that hold at the end; `base` supplies the abstractions the new example
/// keeps (comments, abstracted state).
pub fn relabel(
    engine: &Engine,
    example_id: &str,
    original: &Instruction,
    partial: &Trajectory,
    score: &EpisodeScore,
    achieved: &[String],
    base: &AbstractionSet,
    log: &mut Vec<CallRecord>,
) -> Result<Example, RelabelError> {
    if !(score.goal_fraction > 0.0 && score.goal_fraction < 1.0) {
        return Err(RelabelError::NotPartial(score.goal_fraction));
    }
    let mut ctx = engine.context();
    ctx.instruction = Some(original.text.clone());
    ctx.history = partial.actions.clone();
    ctx.achieved = achieved.to_vec();
    ctx.textual_state = partial.final_observation().map(|o| o.render_state());
    let (text, summary, plan, comments) = engine.call(TemplateId::Relabel, &ctx, log, |r| {
        let text = r.text(Section::Instruction).unwrap_or_default();
        if text.trim().is_empty() {
            return Err("empty instruction".to_string());
        }
        Ok((text, r.text(Section::Summary).unwrap_or_default(), r.items(Section::Plan), r.items(Section::AbstractionComments)))
    })?;
    let mut abstractions = base.clone();
    abstractions.summary = summary;
    abstractions.plan_steps = plan;
    for c in comments {
        if !abstractions.causal_comments.contains(&c) {
            abstractions.causal_comments.push(c);
        }
    }
    let mut instruction = Instruction::new(format!("{}-relabeled", original.id), text.trim(), original.domain_tag.clone());
    instruction.reference_images = original.reference_images.clone();
    Ok(Example {
        example_id: example_id.to_string(),
        instruction,
        trajectory: partial.clone(),
        abstractions,
        embeddings: None,
        lineage: Vec::new(),
        status: ExampleStatus::Relabeled,
    })
}
