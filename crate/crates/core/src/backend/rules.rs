//! Rule-driven stand-in for a language model, answering prompts about the
//! household simulator.
//!
//! The mock recognises the task by its instruction and knows a set of hidden
//! precondition rules. It "knows" a rule when the prompt mentions one of the
//! rule's trigger phrases (in example comments, feedback or error text) or
//! when an example script shows the rule's evidence pattern. It then writes
//! the task's reference script as an agent with exactly that knowledge would,
//! so its success depends on what the prompt teaches it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, LazyLock};
use std::time::Instant;

use regex::Regex;
use serde::Deserialize;

use super::{completion, Backend, BackendError, Completion, GenParams};
use crate::model::{Action, AttrValue};
use crate::prompt::{parse_action_program, PromptBundle, TemplateId};
use crate::sim::{household_api, Catalog, TaskSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub id: String,
    pub triggers: Vec<String>,
    pub evidence: Vec<String>,
    pub comment: String,
    #[serde(skip)]
    compiled: Vec<Regex>,
}

#[derive(Debug, Clone)]
pub struct RuleBook {
    rules: Vec<Rule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    rule: Vec<Rule>,
}

impl RuleBook {
    pub fn builtin() -> Self {
        Self::from_toml(include_str!("../../fixtures/rules.toml")).expect("builtin rules")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: RuleFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut rules = file.rule;
        for r in &mut rules {
            r.compiled = r
                .evidence
                .iter()
                .map(|p| Regex::new(p).map_err(|e| format!("rule {}: {e}", r.id)))
                .collect::<Result<_, _>>()?;
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Rules whose trigger phrases occur in `text` (case-insensitive).
    pub fn triggered(&self, text: &str) -> BTreeSet<String> {
        let lower = text.to_lowercase();
        self.rules
            .iter()
            .filter(|r| r.triggers.iter().any(|t| lower.contains(&t.to_lowercase())))
            .map(|r| r.id.clone())
            .collect()
    }

    /// Rules whose evidence patterns match `text`.
    pub fn evidenced(&self, text: &str) -> BTreeSet<String> {
        self.rules.iter().filter(|r| r.compiled.iter().any(|re| re.is_match(text))).map(|r| r.id.clone()).collect()
    }

    pub fn knowledge(&self, text: &str) -> BTreeSet<String> {
        let mut k = self.triggered(text);
        k.extend(self.evidenced(text));
        k
    }
}

pub struct RuleMock {
    catalog: Arc<Catalog>,
    rules: RuleBook,
}

static INSTRUCTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(?:Intended )?[Ii]nstruction: (.+)$").unwrap());
static CANDIDATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^Candidate (\d+):$").unwrap());
static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+\.\s+(.*)$").unwrap());

/// Lines following a `Label:` line up to the next unindented label.
fn block<'a>(input: &'a str, label: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut on = false;
    for line in input.lines() {
        if line == label {
            on = true;
            continue;
        }
        if on {
            let is_label = !line.starts_with(char::is_whitespace)
                && line.ends_with(':')
                && !line.contains('(')
                && !NUMBERED.is_match(line);
            if is_label {
                break;
            }
            out.push(line);
        }
    }
    out
}

fn first_line_value<'a>(input: &'a str, label: &str) -> Option<&'a str> {
    input.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

/// `id -> attributes` from a rendered state (`id (Cat): k=v, k=v`).
fn parse_state(lines: &[&str]) -> BTreeMap<String, BTreeMap<String, AttrValue>> {
    let mut out = BTreeMap::new();
    for l in lines {
        let (head, attrs) = l.split_once(": ").unwrap_or((l, ""));
        let Some(id) = head.split_whitespace().next() else { continue };
        let mut m = BTreeMap::new();
        for kv in attrs.split(", ") {
            if let Some((k, v)) = kv.split_once('=') {
                m.insert(k.trim().to_string(), AttrValue::parse_literal(v.trim()));
            }
        }
        out.insert(id.to_string(), m);
    }
    out
}

fn describe_action(a: &Action) -> String {
    let args = &a.arguments;
    let arg = |i: usize| args.get(i).map(String::as_str).unwrap_or("?");
    let s = match a.skill.as_str() {
        "go_to" => format!("Walk to {}", arg(0)),
        "pickup" => format!("Pick up {}", arg(0)),
        "place" => format!("Put {} in or on {}", arg(0), arg(1)),
        "open" => format!("Open {}", arg(0)),
        "close" => format!("Close {}", arg(0)),
        "toggle_on" => format!("Turn on {}", arg(0)),
        "toggle_off" => format!("Turn off {}", arg(0)),
        "slice" => format!("Slice {}", arg(0)),
        "pour" => format!("Pour {} into {}", arg(0), arg(1)),
        "stop" => "Finish".to_string(),
        other => format!("{other} {}", args.join(" ")),
    };
    match &a.guard {
        Some(g) => format!("{s}, only if {} has {} = {}", g.element, g.attribute, g.value),
        None => s,
    }
}

impl RuleMock {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        Self { catalog, rules: RuleBook::builtin() }
    }

    pub fn with_rules(catalog: Arc<Catalog>, rules: RuleBook) -> Self {
        Self { catalog, rules }
    }

    pub fn rules(&self) -> &RuleBook {
        &self.rules
    }

    fn task(&self, prompt: &PromptBundle) -> Result<&TaskSpec, BackendError> {
        let input = prompt.input_block();
        INSTRUCTION
            .captures(&input)
            .and_then(|c| self.catalog.by_instruction(c[1].trim()))
            .ok_or_else(|| BackendError::Unscripted { template: prompt.template_id, digest: prompt.digest() })
    }

    /// Everything the prompt teaches about the hidden rules.
    pub fn knowledge(&self, prompt: &PromptBundle) -> BTreeSet<String> {
        self.rules.knowledge(&prompt.user_text)
    }

    fn comments_for(&self, task: &TaskSpec, known: &BTreeSet<String>) -> Vec<String> {
        let relevant = task.reference.rules();
        let mut out: Vec<String> = self
            .rules
            .rules()
            .iter()
            .filter(|r| known.contains(&r.id) && relevant.contains(&r.id))
            .map(|r| r.comment.clone())
            .collect();
        if out.is_empty() {
            out.push("Move only to objects the task needs and finish as soon as the goal holds.".into());
        }
        out
    }

    fn body_sections(&self, task: &TaskSpec, known: &BTreeSet<String>, input: &str, program_header: &str) -> String {
        let program = task.reference.render(known);
        let actions = parse_action_program(&program, &household_api()).map(|p| p.actions).unwrap_or_default();
        let state = parse_state(&block(input, "Current state:"));
        let mut ids: Vec<&str> = Vec::new();
        for a in &actions {
            for arg in &a.arguments {
                if !ids.contains(&arg.as_str()) {
                    ids.push(arg);
                }
            }
        }
        let abstracted: Vec<String> = ids
            .iter()
            .filter(|id| state.contains_key(**id))
            .map(|id| {
                let attrs = &state[*id];
                let desc: Vec<String> = attrs.iter().map(|(k, v)| format!("{k} {v}")).collect();
                if desc.is_empty() {
                    format!("{id}: present")
                } else {
                    format!("{id}: {}", desc.join(", "))
                }
            })
            .collect();
        let changes: Vec<String> = program
            .lines()
            .filter_map(|l| l.trim().strip_prefix("change_state(")?.strip_suffix(')').map(str::to_string))
            .map(|c| {
                let parts: Vec<&str> = c.split(", ").collect();
                match parts.as_slice() {
                    [e, a, v] => format!("{e}.{a} -> {v}"),
                    _ => c.clone(),
                }
            })
            .collect();
        let mut out = String::new();
        out.push_str(&format!("Summary: The agent carries out the instruction \"{}\".\n", task.instruction_text));
        out.push_str("Abstracted State:\n");
        for (i, s) in abstracted.iter().enumerate() {
            out.push_str(&format!("{}. {s}\n", i + 1));
        }
        out.push_str("Step-by-step Reasoning:\n");
        for (i, a) in actions.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, describe_action(a)));
        }
        out.push_str(&format!("Predicted State Change: {}\n", if changes.is_empty() { "none".into() } else { changes.join("; ") }));
        out.push_str("Abstraction Comments:\n");
        for (i, c) in self.comments_for(task, known).iter().enumerate() {
            out.push_str(&format!("{}. {c}\n", i + 1));
        }
        out.push_str(&format!("{program_header}:\n```python\n{program}```\n"));
        out
    }

    fn abstraction(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let task = self.task(prompt)?;
        let known = self.knowledge(prompt);
        Ok(self.body_sections(task, &known, &prompt.input_block(), "Optimized Demonstration Script"))
    }

    fn revision(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let task = self.task(prompt)?;
        let known = self.knowledge(prompt);
        let input = prompt.input_block();
        let feedback = first_line_value(&input, "Human feedback:").unwrap_or("").to_string();
        let new_rules = self.rules.triggered(&feedback);
        let mut out = format!("Explain: The script went wrong: {feedback}\nCorrection Abstraction:\n");
        let corrections: Vec<String> = if new_rules.is_empty() {
            vec![format!("Keep this feedback in mind next time: {feedback}")]
        } else {
            self.rules.rules().iter().filter(|r| new_rules.contains(&r.id)).map(|r| r.comment.clone()).collect()
        };
        for (i, c) in corrections.iter().enumerate() {
            out.push_str(&format!("{}. {c}\n", i + 1));
        }
        out.push_str(&self.body_sections(task, &known, &input, "Revised Action"));
        Ok(out)
    }

    fn deployment(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let task = self.task(prompt)?;
        let known = self.knowledge(prompt);
        let input = prompt.input_block();
        let program = task.reference.render(&known);
        if !input.contains("Previous actions:") {
            return Ok(format!(
                "Summary: Plan for \"{}\".\nPredicted Actions:\n```python\n{program}```\n",
                task.instruction_text
            ));
        }
        let plan = parse_action_program(&program, &household_api()).map(|p| p.actions).unwrap_or_default();
        let history: Vec<String> = block(&input, "Previous actions:")
            .iter()
            .filter_map(|l| NUMBERED.captures(l).map(|c| c[1].trim().to_string()))
            .collect();
        let state = parse_state(&block(&input, "Current state:"));
        let holds = |a: &Action| match &a.guard {
            None => true,
            Some(g) => {
                let v = state.get(&g.element).and_then(|m| m.get(&g.attribute));
                match v {
                    Some(v) => *v == g.value,
                    None => g.value == AttrValue::Bool(false),
                }
            }
        };
        let mut pos = 0;
        for h in &history {
            if let Some(off) = plan[pos..].iter().position(|a| a.call_text() == *h) {
                pos += off + 1;
            }
        }
        let next = plan[pos.min(plan.len())..]
            .iter()
            .find(|a| holds(a))
            .map(|a| a.call_text())
            .unwrap_or_else(|| "stop()".into());
        Ok(format!("Summary: Next step for \"{}\".\nPredicted Actions:\n```python\n{next}\n```\n", task.instruction_text))
    }

    fn relabel(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let input = prompt.input_block();
        let items = |label: &str| -> Vec<String> {
            block(&input, label).iter().filter_map(|l| NUMBERED.captures(l).map(|c| c[1].trim().to_string())).collect()
        };
        let achieved = items("Achieved conditions:");
        let actions = items("Previous actions:");
        let instruction = if achieved.is_empty() {
            "Walk around the house and look at the objects.".to_string()
        } else {
            format!("Make sure that {}.", achieved.join(" and "))
        };
        let mut out = format!("Instruction: {instruction}\nSummary: The agent did this: {}.\nPlan:\n", actions.join(", "));
        for (i, a) in actions.iter().enumerate() {
            out.push_str(&format!("{}. {a}\n", i + 1));
        }
        let known = self.rules.triggered(&input);
        if !known.is_empty() {
            out.push_str("Abstraction Comments:\n");
            for (i, r) in self.rules.rules().iter().filter(|r| known.contains(&r.id)).enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, r.comment));
            }
        }
        Ok(out)
    }

    fn self_eval(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let input = prompt.input_block();
        let starts: Vec<(usize, usize)> =
            CANDIDATE.captures_iter(&input).map(|c| (c.get(0).unwrap().start(), c[1].parse().unwrap_or(0))).collect();
        let mut best = (0usize, 0usize, 0usize);
        for (i, (start, n)) in starts.iter().enumerate() {
            let end = starts.get(i + 1).map_or(input.len(), |s| s.0);
            let text = &input[*start..end];
            let score = (self.rules.evidenced(text).len(), text.lines().count());
            if best.0 == 0 || score > (best.1, best.2) {
                best = (*n, score.0, score.1);
            }
        }
        if best.0 == 0 {
            return Err(BackendError::BadResponse("no candidates in prompt".into()));
        }
        Ok(format!("Choice: {}\nJustification: It covers the most preconditions.\n", best.0))
    }
}

impl Backend for RuleMock {
    fn id(&self) -> &str {
        "mock:rules"
    }

    fn complete(&self, prompt: &PromptBundle, _: &GenParams) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let text = match prompt.template_id {
            TemplateId::Abstraction => self.abstraction(prompt)?,
            TemplateId::HitlRevision => self.revision(prompt)?,
            TemplateId::Deployment => self.deployment(prompt)?,
            TemplateId::Relabel => self.relabel(prompt)?,
            TemplateId::SelfEval => self.self_eval(prompt)?,
        };
        Ok(completion(self.id(), prompt, text, started))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_carry_their_triggers() {
        let book = RuleBook::builtin();
        for r in book.rules() {
            assert!(book.triggered(&r.comment).contains(&r.id), "{}", r.id);
        }
    }

    #[test]
    fn evidence_patterns() {
        let book = RuleBook::builtin();
        let k = book.evidenced("pickup(knife_1)\nopen(fridge_1)\nplace(pot_1, sink_basin_1)\n");
        assert_eq!(k, ["fill_water", "knife", "open"].iter().map(|s| s.to_string()).collect());
        // Conditional rules are not inferred from actions alone.
        assert!(book.evidenced("place(plate_1, sink_basin_1)\nclose(microwave_1)").is_empty());
    }

    #[test]
    fn state_lines() {
        let s = parse_state(&["mug_1 (Mug): dirty=true, parent=countertop_1", "agent (Agent)"]);
        assert_eq!(s["mug_1"]["dirty"], AttrValue::Bool(true));
        assert!(s["agent"].is_empty());
    }
}
