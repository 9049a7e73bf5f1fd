//! Data model shared by every stage: instructions, observations, trajectories,
//! language abstractions and stored examples.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::image::ImageRef;

/// A natural-language task instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub reference_images: Vec<ImageRef>,
    pub domain_tag: String,
}

impl Instruction {
    pub fn new(id: impl Into<String>, text: impl Into<String>, domain_tag: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            reference_images: Vec::new(),
            domain_tag: domain_tag.into(),
        }
    }
}

/// Attribute value of a state element. Booleans cover flags such as `dirty`,
/// text covers references (`parent`) and enumerations (`filled`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Text(String),
}

impl AttrValue {
    /// Parses a literal as written in programs and prompts. `True`/`true`
    /// become booleans, quotes are stripped, anything else is text.
    pub fn parse_literal(raw: &str) -> Self {
        let t = raw.trim().trim_matches(|c| c == '"' || c == '\'');
        match t {
            "true" | "True" | "TRUE" => AttrValue::Bool(true),
            "false" | "False" | "FALSE" => AttrValue::Bool(false),
            _ => AttrValue::Text(t.to_string()),
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AttrValue::Bool(b) => Some(*b),
            AttrValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            AttrValue::Text(s) => Some(s),
            AttrValue::Bool(_) => None,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<bool> for AttrValue {
    fn from(b: bool) -> Self {
        AttrValue::Bool(b)
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateElement {
    pub element_id: String,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default)]
    pub interacted: bool,
}

impl StateElement {
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.get(name)
    }

    /// One-line rendering used in prompts and textual-state embeddings,
    /// e.g. `plate_1 (Plate): dirty=true, parent=countertop_1`.
    pub fn describe(&self) -> String {
        let attrs: Vec<String> = self.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if attrs.is_empty() {
            format!("{} ({})", self.element_id, self.category)
        } else {
            format!("{} ({}): {}", self.element_id, self.category, attrs.join(", "))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
    #[serde(default)]
    pub textual_state: Vec<StateElement>,
    /// Failure sentence of the action that led to this observation, if it failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_failure: Option<String>,
}

impl Observation {
    pub fn element(&self, id: &str) -> Option<&StateElement> {
        self.textual_state.iter().find(|e| e.element_id == id)
    }

    pub fn render_state(&self) -> String {
        self.textual_state.iter().map(StateElement::describe).collect::<Vec<_>>().join("\n")
    }
}

/// Attribute test attached to guarded actions (`if check_attribute(...)`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub element: String,
    pub attribute: String,
    pub value: AttrValue,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check_attribute({}, {}, {})", self.element, self.attribute, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub skill: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub raw_text: String,
    /// Present when the action sits inside a conditional block. Consecutive
    /// actions sharing an equal guard form one block, evaluated once at its start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<Condition>,
}

impl Action {
    pub fn new(skill: impl Into<String>, arguments: &[&str]) -> Self {
        let skill = skill.into();
        let arguments: Vec<String> = arguments.iter().map(|s| s.to_string()).collect();
        let raw_text = format!("{}({})", skill, arguments.join(", "));
        Self { skill, arguments, raw_text, guard: None }
    }

    pub fn guarded(mut self, guard: Condition) -> Self {
        self.guard = Some(guard);
        self
    }

    /// Canonical call syntax, independent of the surface form it was parsed from.
    pub fn call_text(&self) -> String {
        format!("{}({})", self.skill, self.arguments.join(", "))
    }

    /// Equality on skill, arguments and guard; ignores `raw_text`.
    pub fn same_call(&self, other: &Action) -> bool {
        self.skill == other.skill && self.arguments == other.arguments && self.guard == other.guard
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.call_text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Noisy,
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    HumanDemo,
    VisualDemo,
    AgentRollout,
}

/// How observations line up with actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One observation before every action plus the final one (n + 1).
    Transitions,
    /// One observation per action (n), as in action logs without a final frame.
    PerAction,
    /// Only the initial observation of a program that has not been executed yet.
    InitialOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub kind: TrajectoryKind,
    pub source: TrajectorySource,
}

impl Trajectory {
    pub fn empty(kind: TrajectoryKind, source: TrajectorySource) -> Self {
        Self { observations: Vec::new(), actions: Vec::new(), kind, source }
    }

    pub fn layout(&self) -> Option<Layout> {
        let (o, a) = (self.observations.len(), self.actions.len());
        if o == a + 1 {
            Some(Layout::Transitions)
        } else if o == a {
            Some(Layout::PerAction)
        } else if o == 1 && self.kind == TrajectoryKind::Optimized {
            Some(Layout::InitialOnly)
        } else {
            None
        }
    }

    pub fn initial_observation(&self) -> Option<&Observation> {
        self.observations.first()
    }

    pub fn final_observation(&self) -> Option<&Observation> {
        self.observations.last()
    }

    /// Ids of every element that appears in any observation.
    pub fn observed_ids(&self) -> std::collections::BTreeSet<&str> {
        self.observations
            .iter()
            .flat_map(|o| o.textual_state.iter().map(|e| e.element_id.as_str()))
            .collect()
    }

    /// Ids referenced as action arguments, in first-use order.
    pub fn touched_ids(&self) -> Vec<String> {
        let observed = self.observed_ids();
        let mut out: Vec<String> = Vec::new();
        for a in &self.actions {
            for arg in &a.arguments {
                if observed.contains(arg.as_str()) && !out.contains(arg) {
                    out.push(arg.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub element_id: String,
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<AttrValue>,
    pub after: AttrValue,
    pub step_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractedElement {
    pub element_id: String,
    pub description: String,
    #[serde(default)]
    pub vlm_suggested: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractionSet {
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub plan_steps: Vec<String>,
    #[serde(default)]
    pub causal_comments: Vec<String>,
    #[serde(default)]
    pub state_changes: Vec<StateChange>,
    #[serde(default)]
    pub abstracted_state: Vec<AbstractedElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_next_state: Option<String>,
}

impl AbstractionSet {
    /// Renders the abstracted state as `id: description` lines.
    pub fn render_abstracted_state(&self) -> String {
        self.abstracted_state
            .iter()
            .map(|e| format!("{}: {}", e.element_id, e.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Concatenates comments and plans and dedupes state changes by
    /// (element, attribute, step).
    pub fn merge(sets: &[AbstractionSet]) -> AbstractionSet {
        let mut out = AbstractionSet::default();
        for s in sets {
            if out.summary.is_empty() {
                out.summary = s.summary.clone();
            } else if !s.summary.is_empty() && s.summary != out.summary {
                out.summary = format!("{} {}", out.summary, s.summary);
            }
            out.plan_steps.extend(s.plan_steps.iter().cloned());
            out.causal_comments.extend(s.causal_comments.iter().cloned());
            for c in &s.state_changes {
                let dup = out.state_changes.iter().any(|x| {
                    x.element_id == c.element_id && x.attribute == c.attribute && x.step_index == c.step_index
                });
                if !dup {
                    out.state_changes.push(c.clone());
                }
            }
            for e in &s.abstracted_state {
                if !out.abstracted_state.iter().any(|x| x.element_id == e.element_id) {
                    out.abstracted_state.push(e.clone());
                }
            }
            if s.predicted_next_state.is_some() {
                out.predicted_next_state = s.predicted_next_state.clone();
            }
        }
        out
    }
}

/// Vectors describing one example for retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub instruction_vec: Vec<f64>,
    pub textual_state_vec: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_vec: Option<Vec<f64>>,
    pub provider_id: String,
    pub dim: usize,
}

impl EmbeddingBundle {
    /// Checks dimensions and unit norm (within 1e-6) of every present vector.
    pub fn check(&self) -> Result<(), String> {
        let mut vecs = vec![("instruction_vec", &self.instruction_vec), ("textual_state_vec", &self.textual_state_vec)];
        if let Some(v) = &self.visual_vec {
            vecs.push(("visual_vec", v));
        }
        for (name, v) in vecs {
            if v.len() != self.dim {
                return Err(format!("{name} has dimension {} but provider declares {}", v.len(), self.dim));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(format!("{name} has norm {norm}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub step_index: u32,
    pub feedback: String,
    pub timestamp: u64,
    #[serde(default)]
    pub correction_comments: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleStatus {
    Accepted,
    Relabeled,
    /// Unprocessed demonstration stored verbatim; used as a comparison baseline.
    RawDemo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub instruction: Instruction,
    pub trajectory: Trajectory,
    pub abstractions: AbstractionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingBundle>,
    #[serde(default)]
    pub lineage: Vec<RevisionRecord>,
    pub status: ExampleStatus,
}

/// Parameter kinds of a skill argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Object,
    Receptacle,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub params: Vec<ParamKind>,
    pub doc: String,
}

impl SkillSpec {
    pub fn new(name: &str, params: &[ParamKind], doc: &str) -> Self {
        Self { name: name.to_string(), params: params.to_vec(), doc: doc.to_string() }
    }

    pub fn arity(&self) -> usize {
        self.params.len()
    }

    pub fn signature(&self) -> String {
        let names: Vec<&str> = ["X", "Y", "Z"].iter().copied().take(self.params.len()).collect();
        format!("{}({})", self.name, names.join(", "))
    }
}

/// The skill set available to the agent, plus the attribute vocabulary of
/// state elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionApi {
    pub skills: Vec<SkillSpec>,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl ActionApi {
    pub fn skill(&self, name: &str) -> Option<&SkillSpec> {
        self.skills.iter().find(|s| s.name == name)
    }

    /// Text listing of the skills as shown to the model.
    pub fn render_doc(&self) -> String {
        self.skills.iter().map(|s| format!("{}: {}", s.signature(), s.doc)).collect::<Vec<_>>().join("\n")
    }

    /// Checks unique names and non-empty docs.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.skills {
            if !seen.insert(s.name.as_str()) {
                return Err(format!("duplicate skill {}", s.name));
            }
            if s.doc.trim().is_empty() {
                return Err(format!("skill {} has no doc line", s.name));
            }
        }
        Ok(())
    }

    /// A small browser-navigation API used for web-agent style transcripts.
    pub fn web() -> Self {
        use ParamKind::*;
        Self {
            skills: vec![
                SkillSpec::new("click", &[Object], "click the element with the given numeric id"),
                SkillSpec::new("type", &[Object, Literal], "type text into the element with the given id"),
                SkillSpec::new("hover", &[Object], "hover over the element with the given id"),
                SkillSpec::new("scroll", &[Literal], "scroll the page up or down"),
                SkillSpec::new("go_back", &[], "navigate to the previous page"),
                SkillSpec::new("stop", &[Literal], "finish the task, optionally with an answer"),
            ],
            attributes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownSkill { index: usize, skill: String },
    BadArity { index: usize, skill: String, expected: usize, found: usize },
    NonContiguousStep { position: usize, expected: u32, found: u32 },
    LayoutMismatch { observations: usize, actions: usize },
    UnknownAttribute { step_index: u32, element: String, attribute: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownSkill { index, skill } => write!(f, "action {index}: unknown skill {skill:?}"),
            Violation::BadArity { index, skill, expected, found } => {
                write!(f, "action {index}: {skill} takes {expected} arguments, got {found}")
            }
            Violation::NonContiguousStep { position, expected, found } => {
                write!(f, "observation {position}: step index {found}, expected {expected}")
            }
            Violation::LayoutMismatch { observations, actions } => {
                write!(f, "{observations} observations do not fit {actions} actions")
            }
            Violation::UnknownAttribute { step_index, element, attribute } => {
                write!(f, "step {step_index}: {element} has undeclared attribute {attribute:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub layout: Option<Layout>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_trajectory(t: &Trajectory, api: &ActionApi) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, a) in t.actions.iter().enumerate() {
        match api.skill(&a.skill) {
            None => violations.push(Violation::UnknownSkill { index, skill: a.skill.clone() }),
            Some(spec) if spec.arity() != a.arguments.len() => violations.push(Violation::BadArity {
                index,
                skill: a.skill.clone(),
                expected: spec.arity(),
                found: a.arguments.len(),
            }),
            Some(_) => {}
        }
    }
    for (position, o) in t.observations.iter().enumerate() {
        let expected = position as u32;
        if o.step_index != expected {
            violations.push(Violation::NonContiguousStep { position, expected, found: o.step_index });
        }
        if !api.attributes.is_empty() {
            for e in &o.textual_state {
                for name in e.attributes.keys() {
                    if !api.attributes.iter().any(|a| a == name) {
                        violations.push(Violation::UnknownAttribute {
                            step_index: o.step_index,
                            element: e.element_id.clone(),
                            attribute: name.clone(),
                        });
                    }
                }
            }
        }
    }
    let layout = t.layout();
    if layout.is_none() {
        violations.push(Violation::LayoutMismatch { observations: t.observations.len(), actions: t.actions.len() });
    }
    ValidationReport { violations, layout }
}

/// Structural checks on a stored example on top of trajectory validation.
pub fn validate_example(e: &Example, api: &ActionApi) -> Result<(), String> {
    let report = validate_trajectory(&e.trajectory, api);
    if let Some(v) = report.violations.first() {
        return Err(v.to_string());
    }
    if e.instruction.text.trim().is_empty() {
        return Err("instruction text is empty".into());
    }
    if e.status != ExampleStatus::RawDemo && e.trajectory.kind != TrajectoryKind::Optimized {
        return Err("stored trajectory must be optimized".into());
    }
    if e.status == ExampleStatus::Accepted
        && (e.abstractions.summary.trim().is_empty() || e.abstractions.plan_steps.is_empty())
    {
        return Err("accepted examples need a summary and plan steps".into());
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
#[error("cannot decode example at `{path}`: {message}")]
pub struct DecodeError {
    pub path: String,
    pub message: String,
}

pub fn serialize_example(e: &Example) -> Vec<u8> {
    serde_json::to_vec(e).expect("examples always serialize")
}

pub fn deserialize_example(bytes: &[u8]) -> Result<Example, DecodeError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|err| DecodeError {
        path: err.path().to_string(),
        message: err.inner().to_string(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSummary {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditSummary {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Minimal edit script turning `a`'s actions into `b`'s (Levenshtein over
/// whole actions; raw text is ignored).
pub fn diff_actions(a: &Trajectory, b: &Trajectory) -> EditSummary {
    diff_action_lists(&a.actions, &b.actions)
}

pub fn diff_action_lists(a: &[Action], b: &[Action]) -> EditSummary {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, x) in d[0].iter_mut().enumerate() {
        *x = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = if a[i - 1].same_call(&b[j - 1]) { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + sub).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = EditSummary::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub = if a[i - 1].same_call(&b[j - 1]) { 0 } else { 1 };
            if d[i][j] == d[i - 1][j - 1] + sub {
                out.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}
