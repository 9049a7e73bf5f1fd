//! Action-program surface syntax: one skill call per line, optional
//! object-binding declarations, single-level `if check_attribute(...)` blocks
//! and `change_state(...)` annotations.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Action, ActionApi, AttrValue, Condition, StateChange};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedProgram {
    pub actions: Vec<Action>,
    pub state_changes: Vec<StateChange>,
    /// Alias → element id, from `x = InteractionObject(...)` lines.
    pub bindings: BTreeMap<String, String>,
    pub errors: Vec<LineError>,
    /// Interpretations applied while parsing (for instance a constructor
    /// without an instance id binding the alias to itself).
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProgramError {
    #[error("no actions found")]
    NoActions { errors: Vec<LineError> },
}

static CONSTRUCTOR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z_]\w*)\s*=\s*InteractionObject\s*\((.*)\)$").unwrap());
static IF_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^if\s+(.+?)\s*:$").unwrap());
static METHOD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_]\w*)\.([A-Za-z_]\w*)\s*\((.*)\)$").unwrap());
static CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_]\w*)\s*\((.*)\)$").unwrap());
static BRACKET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Za-z_]\w*)((?:\s*\[[^\]]*\])*)$").unwrap());
static BRACKET_ARG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\]]*)\]").unwrap());

/// Extracts the code to parse: the contents of fenced blocks (including
/// single-line ```spans```) when present, the whole text otherwise.
pub fn extract_code(text: &str) -> String {
    if !text.contains("```") {
        return text.to_string();
    }
    let mut out = String::new();
    // Odd segments are inside fences; an unterminated fence runs to the end.
    for seg in text.split("```").skip(1).step_by(2) {
        let body = match seg.split_once('\n') {
            Some((first, rest)) if is_language_tag(first) => rest,
            _ => seg,
        };
        out.push_str(body.trim_end_matches([' ', '\t']));
        if !out.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

fn is_language_tag(first_line: &str) -> bool {
    let t = first_line.trim();
    t.is_empty() || t.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), c2) if c2 == q => quote = None,
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Splits an argument list at top-level commas.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    for c in s.chars() {
        match (quote, c) {
            (Some(q), c2) if c2 == q => {
                quote = None;
                cur.push(c);
            }
            (Some(_), _) => cur.push(c),
            (None, '"' | '\'') => {
                quote = Some(c);
                cur.push(c);
            }
            (None, '(' | '[') => {
                depth += 1;
                cur.push(c);
            }
            (None, ')' | ']') => {
                depth -= 1;
                cur.push(c);
            }
            (None, ',') if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn is_quoted(s: &str) -> bool {
    s.len() >= 2 && ((s.starts_with('"') && s.ends_with('"')) || (s.starts_with('\'') && s.ends_with('\'')))
}

struct Parser<'a> {
    api: &'a ActionApi,
    out: ParsedProgram,
}

impl Parser<'_> {
    fn resolve(&self, raw: &str) -> String {
        let raw = raw.trim();
        let value = match raw.split_once('=') {
            Some((k, v)) if !k.contains(['"', '\'', '(']) && !k.trim().is_empty() => v.trim(),
            _ => raw,
        };
        if is_quoted(value) {
            return value[1..value.len() - 1].to_string();
        }
        match value {
            "True" | "true" => return "true".into(),
            "False" | "false" => return "false".into(),
            _ => {}
        }
        let base = value.strip_suffix(".object_instance").unwrap_or(value);
        self.out.bindings.get(base).cloned().unwrap_or_else(|| base.to_string())
    }

    fn err(&mut self, line: usize, text: &str, reason: impl Into<String>) {
        self.out.errors.push(LineError { line, text: text.to_string(), reason: reason.into() });
    }

    /// Parses one statement into (skill, arguments).
    fn call(&self, stmt: &str) -> Option<(String, Vec<String>)> {
        if let Some(c) = METHOD.captures(stmt) {
            let mut args = vec![self.resolve(&c[1])];
            args.extend(split_args(&c[3]).iter().map(|a| self.resolve(a)));
            return Some((c[2].to_string(), args));
        }
        if let Some(c) = CALL.captures(stmt) {
            return Some((c[1].to_string(), split_args(&c[2]).iter().map(|a| self.resolve(a)).collect()));
        }
        if let Some(c) = BRACKET.captures(stmt) {
            let skill = c[1].to_string();
            let args: Vec<String> = BRACKET_ARG.captures_iter(&c[2]).map(|m| m[1].trim().to_string()).collect();
            if !args.is_empty() || self.api.skill(&skill).is_some_and(|s| s.arity() == 0) {
                return Some((skill, args));
            }
        }
        None
    }

    fn condition(&self, expr: &str) -> Option<Condition> {
        let (skill, args) = self.call(expr)?;
        if skill != "check_attribute" || args.len() != 3 {
            return None;
        }
        Some(Condition { element: args[0].clone(), attribute: args[1].clone(), value: AttrValue::parse_literal(&args[2]) })
    }

    fn constructor(&mut self, alias: &str, body: &str) {
        let args = split_args(body);
        let mut instance: Option<String> = None;
        for a in &args {
            if let Some((k, v)) = a.split_once('=') {
                if k.trim() == "object_instance" {
                    let v = v.trim();
                    if is_quoted(v) {
                        instance = Some(v[1..v.len() - 1].to_string());
                    }
                }
            }
        }
        match instance {
            Some(id) => {
                self.out.bindings.insert(alias.to_string(), id);
            }
            None => {
                self.out.bindings.insert(alias.to_string(), alias.to_string());
                self.out.flags.push(format!("{alias}: constructor without an instance id binds the alias name"));
            }
        }
    }

    fn statement(&mut self, no: usize, raw: &str, stmt: &str, guard: Option<&Condition>) {
        let Some((skill, args)) = self.call(stmt) else {
            self.err(no, raw, "not a skill call");
            return;
        };
        if skill == "change_state" {
            if args.len() != 3 {
                self.err(no, raw, "change_state takes an element, an attribute and a value");
                return;
            }
            self.out.state_changes.push(StateChange {
                element_id: args[0].clone(),
                attribute: args[1].clone(),
                before: None,
                after: AttrValue::parse_literal(&args[2]),
                step_index: self.out.actions.len() as u32,
            });
            return;
        }
        let Some(spec) = self.api.skill(&skill) else {
            self.err(no, raw, format!("unknown skill {skill:?}"));
            return;
        };
        if spec.arity() != args.len() {
            self.err(no, raw, format!("{skill} takes {} arguments, got {}", spec.arity(), args.len()));
            return;
        }
        self.out.actions.push(Action { skill, arguments: args, raw_text: raw.trim().to_string(), guard: guard.cloned() });
    }
}

/// Parses an action program. Unknown skills and malformed lines are reported
/// per line; every well-formed line still parses.
pub fn parse_action_program(text: &str, api: &ActionApi) -> Result<ParsedProgram, ProgramError> {
    let code = extract_code(text);
    let mut p = Parser { api, out: ParsedProgram::default() };
    let mut block: Option<(usize, Condition)> = None;
    for (i, raw) in code.lines().enumerate() {
        let no = i + 1;
        let line = strip_comment(raw).trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let indent = line.len() - line.trim_start().len();
        let stmt = line.trim();
        if let Some((block_indent, _)) = &block {
            if indent <= *block_indent {
                block = None;
            }
        }
        if let Some(c) = CONSTRUCTOR.captures(stmt) {
            let (alias, body) = (c[1].to_string(), c[2].to_string());
            p.constructor(&alias, &body);
            continue;
        }
        if let Some(c) = IF_LINE.captures(stmt) {
            if block.is_some() {
                p.err(no, raw, "nested conditionals are not supported");
                continue;
            }
            match p.condition(&c[1]) {
                Some(cond) => block = Some((indent, cond)),
                None => p.err(no, raw, "conditions must be check_attribute(element, attribute, value)"),
            }
            continue;
        }
        let guard = block.as_ref().map(|(_, c)| c.clone());
        p.statement(no, raw, stmt, guard.as_ref());
    }
    if p.out.actions.is_empty() {
        return Err(ProgramError::NoActions { errors: p.out.errors });
    }
    Ok(p.out)
}

fn render_change(c: &StateChange) -> String {
    format!("change_state({}, {}, {})", c.element_id, c.attribute, c.after)
}

/// Canonical text of a program. `parse_action_program` of the output yields
/// the same actions and state changes.
pub fn render_program(actions: &[Action], changes: &[StateChange]) -> String {
    let mut out = String::new();
    let mut current: Option<&Condition> = None;
    let changes_at = |i: usize| changes.iter().filter(move |c| c.step_index as usize == i);
    for (i, a) in actions.iter().enumerate() {
        if a.guard.as_ref() != current {
            for c in changes_at(i) {
                let pad = if current.is_some() { "    " } else { "" };
                out.push_str(&format!("{pad}{}\n", render_change(c)));
            }
            if let Some(g) = &a.guard {
                out.push_str(&format!("if {g}:\n"));
            }
            current = a.guard.as_ref();
        } else {
            for c in changes_at(i) {
                let pad = if current.is_some() { "    " } else { "" };
                out.push_str(&format!("{pad}{}\n", render_change(c)));
            }
        }
        let pad = if current.is_some() { "    " } else { "" };
        out.push_str(&format!("{pad}{}\n", a.call_text()));
    }
    for c in changes.iter().filter(|c| c.step_index as usize >= actions.len()) {
        let pad = if current.is_some() { "    " } else { "" };
        out.push_str(&format!("{pad}{}\n", render_change(c)));
    }
    out
}
