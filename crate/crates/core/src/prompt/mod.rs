//! Prompt templates, prompt assembly and parsing of model output.

mod program;
mod response;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::ImageRef;
use crate::model::{Action, ActionApi, Example, Trajectory};

pub use program::{extract_code, parse_action_program, render_program, LineError, ParsedProgram, ProgramError};
pub use response::{parse_response, render_response, Body, ItemError, ParseError, ParsedResponse, Section};

pub const EXAMPLES_BEGIN: &str = "=== Examples ===";
pub const EXAMPLES_END: &str = "=== End of examples ===";
pub const NO_EXAMPLES: &str = "(no examples available)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Abstraction,
    HitlRevision,
    Deployment,
    Relabel,
    SelfEval,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] =
        [TemplateId::Abstraction, TemplateId::HitlRevision, TemplateId::Deployment, TemplateId::Relabel, TemplateId::SelfEval];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Abstraction => "abstraction",
            TemplateId::HitlRevision => "hitl_revision",
            TemplateId::Deployment => "deployment",
            TemplateId::Relabel => "relabel",
            TemplateId::SelfEval => "self_eval",
        }
    }

    pub fn required_sections(self) -> &'static [Section] {
        use Section::*;
        match self {
            TemplateId::Abstraction => &[Summary, AbstractedState, Plan, PredictedState, AbstractionComments, Program],
            TemplateId::HitlRevision => &[Explain, CorrectionAbstraction, Program],
            TemplateId::Deployment => &[Program],
            TemplateId::Relabel => &[Instruction, Summary, Plan],
            TemplateId::SelfEval => &[Choice],
        }
    }

    /// Order in which sections are rendered.
    pub fn section_order(self) -> &'static [Section] {
        use Section::*;
        match self {
            TemplateId::Abstraction => {
                &[Summary, AbstractedState, Plan, PredictedState, AbstractionComments, Program, Explain, CorrectionAbstraction, Instruction, Choice, Justification]
            }
            TemplateId::HitlRevision => {
                &[Explain, CorrectionAbstraction, Summary, AbstractedState, Plan, PredictedState, AbstractionComments, Program, Instruction, Choice, Justification]
            }
            TemplateId::Deployment => {
                &[Summary, AbstractedState, Plan, PredictedState, AbstractionComments, Program, Explain, CorrectionAbstraction, Instruction, Choice, Justification]
            }
            TemplateId::Relabel => {
                &[Instruction, Summary, Plan, AbstractionComments, AbstractedState, PredictedState, Program, Explain, CorrectionAbstraction, Choice, Justification]
            }
            TemplateId::SelfEval => {
                &[Choice, Justification, AbstractionComments, Summary, AbstractedState, Plan, PredictedState, Program, Explain, CorrectionAbstraction, Instruction]
            }
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TemplateId::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown template `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: TemplateId,
    pub system: String,
    pub body: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {0}: first line must start with `SYSTEM:`")]
    NoSystemLine(TemplateId),
    #[error("template {0}: missing placeholder {1}")]
    MissingPlaceholder(TemplateId, &'static str),
    #[error("template {0}: {1}")]
    Io(TemplateId, std::io::Error),
}

const PLACEHOLDERS: [&str; 2] = ["{INPUT_INFORMATION}", "{EXAMPLES}"];

impl Template {
    pub fn parse(id: TemplateId, text: &str) -> Result<Self, TemplateError> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let system = first.strip_prefix("SYSTEM:").ok_or(TemplateError::NoSystemLine(id))?.trim().to_string();
        for p in PLACEHOLDERS {
            if !rest.contains(p) {
                return Err(TemplateError::MissingPlaceholder(id, p));
            }
        }
        Ok(Self { id, system, body: rest.trim_end().to_string() })
    }
}

/// The five templates, indexed by id.
#[derive(Debug, Clone)]
pub struct Templates {
    map: BTreeMap<TemplateId, Template>,
}

impl Templates {
    pub fn builtin() -> Self {
        let sources = [
            (TemplateId::Abstraction, include_str!("../../templates/abstraction.txt")),
            (TemplateId::HitlRevision, include_str!("../../templates/hitl_revision.txt")),
            (TemplateId::Deployment, include_str!("../../templates/deployment.txt")),
            (TemplateId::Relabel, include_str!("../../templates/relabel.txt")),
            (TemplateId::SelfEval, include_str!("../../templates/self_eval.txt")),
        ];
        let map = sources
            .into_iter()
            .map(|(id, text)| (id, Template::parse(id, text).expect("builtin template")))
            .collect();
        Self { map }
    }

    /// Loads `<name>.txt` for every template from `dir`; templates without a
    /// file keep the builtin text.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut out = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.name()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(id, e))?;
            out.map.insert(id, Template::parse(id, &text)?);
        }
        Ok(out)
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.map[&id]
    }
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    /// One whole program per task.
    #[default]
    Program,
    /// One action per call.
    Step,
}

/// Everything a template may draw on. Which fields are required depends on
/// the template.
#[derive(Debug, Clone)]
pub struct RenderContext {
    pub domain: String,
    pub domain_task: String,
    pub action_api: ActionApi,
    pub instruction: Option<String>,
    pub textual_state: Option<String>,
    pub examples: Vec<Arc<Example>>,
    pub demonstration: Option<Trajectory>,
    pub program: Option<String>,
    pub comments: Vec<String>,
    pub plan: Vec<String>,
    pub failed_action: Option<String>,
    pub feedback: Option<String>,
    pub history: Vec<Action>,
    pub execution_error: Option<String>,
    pub previous_program: Option<String>,
    pub achieved: Vec<String>,
    pub candidates: Vec<String>,
    /// Free-form note appended to the input block (used when re-prompting).
    pub note: Option<String>,
    pub mode: DeployMode,
    pub image_refs: Vec<ImageRef>,
    /// Rough prompt budget in tokens (characters / 4).
    pub token_budget: Option<usize>,
}

impl RenderContext {
    pub fn new(action_api: ActionApi) -> Self {
        Self {
            domain: "a simulated household".into(),
            domain_task: "the requested household task".into(),
            action_api,
            instruction: None,
            textual_state: None,
            examples: Vec::new(),
            demonstration: None,
            program: None,
            comments: Vec::new(),
            plan: Vec::new(),
            failed_action: None,
            feedback: None,
            history: Vec::new(),
            execution_error: None,
            previous_program: None,
            achieved: Vec::new(),
            candidates: Vec::new(),
            note: None,
            mode: DeployMode::Program,
            image_refs: Vec::new(),
            token_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text: String,
    #[serde(default)]
    pub image_refs: Vec<ImageRef>,
    #[serde(default)]
    pub example_ids: Vec<String>,
    #[serde(default)]
    pub elided_plan_steps: usize,
    #[serde(default)]
    pub over_budget: bool,
}

impl PromptBundle {
    pub fn estimated_tokens(&self) -> usize {
        (self.system_text.len() + self.user_text.len()).div_ceil(4)
    }

    /// Stable hex digest of everything the model sees.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.template_id.name().as_bytes());
        h.update([0]);
        h.update(self.system_text.as_bytes());
        h.update([0]);
        h.update(self.user_text.as_bytes());
        for r in &self.image_refs {
            h.update([0]);
            h.update(r.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// The text between the example markers, if any.
    pub fn examples_block(&self) -> &str {
        let Some(start) = self.user_text.find(EXAMPLES_BEGIN) else { return "" };
        let rest = &self.user_text[start + EXAMPLES_BEGIN.len()..];
        match rest.find(EXAMPLES_END) {
            Some(end) => &rest[..end],
            None => rest,
        }
    }

    /// The user text with the examples block removed.
    pub fn input_block(&self) -> String {
        let Some(start) = self.user_text.find(EXAMPLES_BEGIN) else { return self.user_text.clone() };
        let end = self.user_text[start..]
            .find(EXAMPLES_END)
            .map(|e| start + e + EXAMPLES_END.len())
            .unwrap_or(self.user_text.len());
        format!("{}{}", &self.user_text[..start], &self.user_text[end..])
    }
}

fn numbered(items: &[String]) -> String {
    items.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect::<Vec<_>>().join("\n")
}

/// Renders one stored example, keeping only the last `plan_keep` plan steps.
pub fn render_example(index: usize, ex: &Example, plan_keep: Option<usize>) -> String {
    let a = &ex.abstractions;
    let mut out = format!("Example {index}:\nInstruction: {}\n", ex.instruction.text);
    let state = if a.abstracted_state.is_empty() {
        ex.trajectory.initial_observation().map(|o| o.render_state()).unwrap_or_default()
    } else {
        a.render_abstracted_state()
    };
    out.push_str(&format!("Abstracted State:\n{state}\n"));
    if !a.summary.is_empty() {
        out.push_str(&format!("Summary: {}\n", a.summary));
    }
    if !a.plan_steps.is_empty() {
        let keep = plan_keep.unwrap_or(a.plan_steps.len()).min(a.plan_steps.len());
        let dropped = a.plan_steps.len() - keep;
        out.push_str("Step-by-step Reasoning:\n");
        if dropped > 0 {
            out.push_str(&format!("({dropped} earlier steps omitted)\n"));
        }
        let kept: Vec<String> = a.plan_steps[dropped..].to_vec();
        let lines: Vec<String> = kept.iter().enumerate().map(|(i, s)| format!("{}. {s}", dropped + i + 1)).collect();
        out.push_str(&lines.join("\n"));
        out.push('\n');
    }
    if !a.causal_comments.is_empty() {
        out.push_str(&format!("Abstraction Comments:\n{}\n", numbered(&a.causal_comments)));
    }
    let script = render_program(&ex.trajectory.actions, &a.state_changes);
    out.push_str(&format!("Script:\n```python\n{script}```\n"));
    out
}

fn examples_block(examples: &[Arc<Example>], plan_keep: Option<usize>) -> String {
    let body = if examples.is_empty() {
        NO_EXAMPLES.to_string()
    } else {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| render_example(i + 1, e, plan_keep))
            .collect::<Vec<_>>()
            .join("\n")
    };
    format!("{EXAMPLES_BEGIN}\n{}\n{EXAMPLES_END}", body.trim_end())
}

fn require<'a, T>(v: &'a Option<T>, name: &'static str) -> Result<&'a T, RenderError> {
    v.as_ref().ok_or(RenderError::MissingField(name))
}

fn input_information(id: TemplateId, ctx: &RenderContext) -> Result<String, RenderError> {
    let mut lines: Vec<String> = Vec::new();
    match id {
        TemplateId::Abstraction => {
            let instr = require(&ctx.instruction, "instruction")?;
            let demo = require(&ctx.demonstration, "demonstration")?;
            lines.push(format!("Instruction: {instr}"));
            let state = match &ctx.textual_state {
                Some(s) => s.clone(),
                None => demo.initial_observation().map(|o| o.render_state()).unwrap_or_default(),
            };
            lines.push(format!("Current state:\n{state}"));
            let actions: Vec<Action> =
                demo.actions.iter().cloned().map(|mut a| { a.guard = None; a }).collect();
            lines.push(format!("Demonstration script:\n```python\n{}```", render_program(&actions, &[])));
            let failures: Vec<String> = demo
                .observations
                .iter()
                .skip(1)
                .filter_map(|o| {
                    let f = o.action_failure.as_ref()?;
                    let a = demo.actions.get(o.step_index as usize - 1)?;
                    Some(format!("step {} `{}`: {f}", o.step_index, a.call_text()))
                })
                .collect();
            if !failures.is_empty() {
                lines.push(format!("Failures during the demonstration:\n{}", numbered(&failures)));
            }
            if !ctx.comments.is_empty() {
                lines.push(format!("Current abstraction comments:\n{}", numbered(&ctx.comments)));
            }
        }
        TemplateId::HitlRevision => {
            lines.push(format!("Instruction: {}", require(&ctx.instruction, "instruction")?));
            lines.push(format!("Current state:\n{}", require(&ctx.textual_state, "textual_state")?));
            lines.push(format!("Current script:\n```python\n{}\n```", require(&ctx.program, "program")?.trim_end()));
            if !ctx.plan.is_empty() {
                lines.push(format!("Current plan:\n{}", numbered(&ctx.plan)));
            }
            if !ctx.comments.is_empty() {
                lines.push(format!("Current abstraction comments:\n{}", numbered(&ctx.comments)));
            }
            if let Some(a) = &ctx.failed_action {
                lines.push(format!("Failed action: {a}"));
            }
            lines.push(format!("Human feedback: {}", require(&ctx.feedback, "feedback")?));
        }
        TemplateId::Deployment => {
            lines.push(format!("Instruction: {}", require(&ctx.instruction, "instruction")?));
            lines.push(format!("Current state:\n{}", require(&ctx.textual_state, "textual_state")?));
            if ctx.mode == DeployMode::Step {
                let hist: Vec<String> = ctx.history.iter().map(Action::call_text).collect();
                let shown = if hist.is_empty() { "(none)".to_string() } else { numbered(&hist) };
                lines.push(format!("Previous actions:\n{shown}"));
            }
            if let Some(p) = &ctx.previous_program {
                lines.push(format!("Previous script:\n```python\n{}\n```", p.trim_end()));
            }
            if let Some(e) = &ctx.execution_error {
                lines.push(format!("Execution error: {e}"));
            }
            if ctx.mode == DeployMode::Step {
                lines.push("Respond with the single next action only.".into());
            }
        }
        TemplateId::Relabel => {
            if ctx.history.is_empty() {
                return Err(RenderError::MissingField("history"));
            }
            if let Some(i) = &ctx.instruction {
                lines.push(format!("Intended instruction: {i}"));
            }
            let hist: Vec<String> = ctx.history.iter().map(Action::call_text).collect();
            lines.push(format!("Previous actions:\n{}", numbered(&hist)));
            let achieved = if ctx.achieved.is_empty() { "(none)".to_string() } else { numbered(&ctx.achieved) };
            lines.push(format!("Achieved conditions:\n{achieved}"));
            if let Some(s) = &ctx.textual_state {
                lines.push(format!("Current state:\n{s}"));
            }
        }
        TemplateId::SelfEval => {
            lines.push(format!("Instruction: {}", require(&ctx.instruction, "instruction")?));
            if ctx.candidates.is_empty() {
                return Err(RenderError::MissingField("candidates"));
            }
            if let Some(s) = &ctx.textual_state {
                lines.push(format!("Current state:\n{s}"));
            }
            for (i, c) in ctx.candidates.iter().enumerate() {
                lines.push(format!("Candidate {}:\n```python\n{}\n```", i + 1, c.trim_end()));
            }
        }
    }
    if let Some(n) = &ctx.note {
        lines.push(n.clone());
    }
    Ok(lines.join("\n"))
}

fn fill(text: &str, ctx: &RenderContext, examples: &str, input: &str) -> String {
    text.replace("{DOMAIN_TASK}", &ctx.domain_task)
        .replace("{DOMAIN}", &ctx.domain)
        .replace("{ACTION_API}", &ctx.action_api.render_doc())
        .replace("{EXAMPLES}", examples)
        .replace("{INPUT_INFORMATION}", input)
}

/// Assembles a prompt. When a token budget is set and exceeded, the earliest
/// plan steps of the examples are replaced by a count until the prompt fits;
/// if it still does not fit the bundle is marked `over_budget`.
pub fn render(templates: &Templates, id: TemplateId, ctx: &RenderContext) -> Result<PromptBundle, RenderError> {
    let t = templates.get(id);
    let input = input_information(id, ctx)?;
    let system_text = fill(&t.system, ctx, "", "");
    let mut image_refs = ctx.image_refs.clone();
    for e in &ctx.examples {
        if let Some(r) = e.trajectory.final_observation().and_then(|o| o.image_ref.clone()) {
            image_refs.push(r);
        }
    }
    let mut bundle = PromptBundle {
        template_id: id,
        system_text,
        user_text: fill(&t.body, ctx, &examples_block(&ctx.examples, None), &input),
        image_refs,
        example_ids: ctx.examples.iter().map(|e| e.example_id.clone()).collect(),
        elided_plan_steps: 0,
        over_budget: false,
    };
    let Some(budget) = ctx.token_budget else { return Ok(bundle) };
    let longest = ctx.examples.iter().map(|e| e.abstractions.plan_steps.len()).max().unwrap_or(0);
    let mut keep = longest;
    while bundle.estimated_tokens() > budget && keep > 0 {
        keep -= 1;
        bundle.user_text = fill(&t.body, ctx, &examples_block(&ctx.examples, Some(keep)), &input);
        bundle.elided_plan_steps =
            ctx.examples.iter().map(|e| e.abstractions.plan_steps.len().saturating_sub(keep)).sum();
    }
    bundle.over_budget = bundle.estimated_tokens() > budget;
    Ok(bundle)
}
