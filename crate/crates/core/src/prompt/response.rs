//! Sectioned model responses: `Header:` anchored sections, numbered or
//! bulleted lists, fenced programs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::TemplateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Summary,
    AbstractedState,
    Plan,
    PredictedState,
    AbstractionComments,
    Program,
    Explain,
    CorrectionAbstraction,
    Instruction,
    Choice,
    Justification,
}

/// Header spellings recognised for each section, longest first within the
/// overall table so that prefixes never shadow longer names.
const ALIASES: &[(&str, Section)] = &[
    ("optimized demonstration script", Section::Program),
    ("revised demonstration script", Section::Program),
    ("predicted state changes", Section::PredictedState),
    ("correction abstractions", Section::CorrectionAbstraction),
    ("predicted state change", Section::PredictedState),
    ("step-by-step reasoning", Section::Plan),
    ("correction abstraction", Section::CorrectionAbstraction),
    ("abstraction comments", Section::AbstractionComments),
    ("predicted next state", Section::PredictedState),
    ("step-by-step plan", Section::Plan),
    ("predicted actions", Section::Program),
    ("abstracted state", Section::AbstractedState),
    ("predicted state", Section::PredictedState),
    ("revised action", Section::Program),
    ("justification", Section::Justification),
    ("instruction", Section::Instruction),
    ("reasoning", Section::Plan),
    ("summary", Section::Summary),
    ("explain", Section::Explain),
    ("action", Section::Program),
    ("choice", Section::Choice),
    ("plan", Section::Plan),
];

impl Section {
    pub fn is_list(self) -> bool {
        matches!(
            self,
            Section::AbstractedState | Section::Plan | Section::AbstractionComments | Section::CorrectionAbstraction
        )
    }

    /// Header used when rendering this section for a template.
    pub fn header(self, template: TemplateId) -> &'static str {
        match self {
            Section::Summary => "Summary",
            Section::AbstractedState => "Abstracted State",
            Section::Plan if template == TemplateId::Relabel => "Plan",
            Section::Plan => "Step-by-step Reasoning",
            Section::PredictedState => "Predicted State Change",
            Section::AbstractionComments => "Abstraction Comments",
            Section::Program => match template {
                TemplateId::HitlRevision => "Revised Action",
                TemplateId::Deployment => "Predicted Actions",
                _ => "Optimized Demonstration Script",
            },
            Section::Explain => "Explain",
            Section::CorrectionAbstraction => "Correction Abstraction",
            Section::Instruction => "Instruction",
            Section::Choice => "Choice",
            Section::Justification => "Justification",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.header(TemplateId::Abstraction))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Body {
    Text(String),
    List(Vec<String>),
    /// Contents of a single fenced code block.
    Code(String),
}

impl Body {
    pub fn as_text(&self) -> String {
        match self {
            Body::Text(t) | Body::Code(t) => t.clone(),
            Body::List(items) => items.join("\n"),
        }
    }

    pub fn items(&self) -> Vec<String> {
        match self {
            Body::List(items) => items.clone(),
            Body::Text(t) | Body::Code(t) => {
                if t.trim().is_empty() {
                    vec![]
                } else {
                    vec![t.trim().to_string()]
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub section: Section,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub template: TemplateId,
    pub sections: BTreeMap<Section, Body>,
    /// List entries that did not carry a list marker; kept as raw items.
    #[serde(default)]
    pub item_errors: Vec<ItemError>,
}

impl ParsedResponse {
    pub fn new(template: TemplateId) -> Self {
        Self { template, sections: BTreeMap::new(), item_errors: Vec::new() }
    }

    pub fn text(&self, s: Section) -> Option<String> {
        self.sections.get(&s).map(Body::as_text)
    }

    pub fn items(&self, s: Section) -> Vec<String> {
        self.sections.get(&s).map(Body::items).unwrap_or_default()
    }

    /// Raw program text of the program section: fenced contents when the
    /// model used a fence, the prose otherwise.
    pub fn program_text(&self) -> Option<String> {
        match self.sections.get(&Section::Program)? {
            Body::Code(c) => Some(c.clone()),
            Body::Text(t) => Some(t.clone()),
            Body::List(items) => Some(items.join("\n")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("response is missing sections: {}", missing_sections.join(", "))]
pub struct ParseError {
    pub missing_sections: Vec<String>,
}

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    let names: Vec<String> = ALIASES.iter().map(|(n, _)| regex::escape(n)).collect();
    Regex::new(&format!(
        r"(?i)^\s*(?:>\s*)?(?:#{{1,6}}\s*)?(?:\d+[.)]\s*)?(?:\*\*|__)?\s*({})\s*(?:\*\*|__)?\s*:\s*(?:\*\*|__)?\s*(.*)$",
        names.join("|")
    ))
    .unwrap()
});
static MD_HEADING: LazyLock<Regex> = LazyLock::new(|| {
    let names: Vec<String> = ALIASES.iter().map(|(n, _)| regex::escape(n)).collect();
    Regex::new(&format!(r"(?i)^\s*#{{1,6}}\s*(?:\d+[.)]\s*)?(?:\*\*|__)?\s*({})\s*(?:\*\*|__)?\s*$", names.join("|"))).unwrap()
});
static LIST_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s+(.*)$").unwrap());

fn section_of(name: &str) -> Section {
    let lower = name.to_ascii_lowercase();
    ALIASES.iter().find(|(n, _)| *n == lower).map(|(_, s)| *s).expect("regex only matches known names")
}

/// Detects a section header, returning the section and any inline content.
fn header(line: &str) -> Option<(Section, String)> {
    if let Some(c) = HEADER.captures(line) {
        return Some((section_of(&c[1]), c[2].trim().to_string()));
    }
    MD_HEADING.captures(line).map(|c| (section_of(&c[1]), String::new()))
}

fn parse_body(section: Section, lines: &[String], errors: &mut Vec<ItemError>) -> Body {
    let text = lines.join("\n").trim().to_string();
    if section == Section::Program {
        let t = text.trim();
        if t.starts_with("```") && t.ends_with("```") && t.len() >= 6 && t.matches("```").count() == 2 {
            let inner = &t[3..t.len() - 3];
            let inner = match inner.split_once('\n') {
                Some((first, rest)) if first.trim().chars().all(|c| c.is_ascii_alphanumeric()) => rest,
                _ => inner,
            };
            return Body::Code(inner.trim_matches('\n').to_string());
        }
        return Body::Text(text);
    }
    if !section.is_list() {
        return Body::Text(text);
    }
    let nonempty: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
    let any_marked = nonempty.iter().any(|l| LIST_ITEM.is_match(l));
    let mut items = Vec::new();
    for l in nonempty {
        match LIST_ITEM.captures(l) {
            Some(c) => items.push(c[1].trim().to_string()),
            None => {
                if any_marked {
                    errors.push(ItemError { section, text: l.trim().to_string() });
                }
                items.push(l.trim().to_string());
            }
        }
    }
    Body::List(items)
}

/// Splits a response into sections. Text before the first header is ignored,
/// headers inside fenced code are not recognised, and a repeated header
/// replaces the earlier occurrence.
pub fn parse_response(template: TemplateId, text: &str) -> Result<ParsedResponse, ParseError> {
    let mut out = ParsedResponse::new(template);
    let mut current: Option<(Section, Vec<String>)> = None;
    let mut in_fence = false;
    let finish = |cur: Option<(Section, Vec<String>)>, out: &mut ParsedResponse| {
        if let Some((s, lines)) = cur {
            let mut errs = Vec::new();
            let body = parse_body(s, &lines, &mut errs);
            out.item_errors.retain(|e| e.section != s);
            out.item_errors.extend(errs);
            out.sections.insert(s, body);
        }
    };
    for line in text.lines() {
        if !in_fence {
            if let Some((s, inline)) = header(line) {
                finish(current.take(), &mut out);
                let mut lines = Vec::new();
                if !inline.is_empty() {
                    lines.push(inline.clone());
                }
                in_fence = inline.matches("```").count() % 2 == 1;
                current = Some((s, lines));
                continue;
            }
        }
        if line.matches("```").count() % 2 == 1 {
            in_fence = !in_fence;
        }
        if let Some((_, lines)) = current.as_mut() {
            lines.push(line.to_string());
        }
    }
    finish(current.take(), &mut out);
    let missing: Vec<String> = template
        .required_sections()
        .iter()
        .filter(|s| !out.sections.contains_key(s))
        .map(|s| s.header(template).to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ParseError { missing_sections: missing });
    }
    Ok(out)
}

/// Canonical text of a response; `parse_response` inverts it.
pub fn render_response(r: &ParsedResponse) -> String {
    let mut out = String::new();
    for s in r.template.section_order() {
        let Some(body) = r.sections.get(s) else { continue };
        let h = s.header(r.template);
        match body {
            Body::Text(t) => out.push_str(&format!("{h}: {t}\n\n")),
            Body::List(items) => {
                out.push_str(&format!("{h}:\n"));
                for (i, it) in items.iter().enumerate() {
                    out.push_str(&format!("{}. {it}\n", i + 1));
                }
                out.push('\n');
            }
            Body::Code(c) => out.push_str(&format!("{h}:\n```python\n{c}\n```\n\n")),
        }
    }
    out.trim_end().to_string() + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANON: &str = "Summary: The agent slices bread.
Abstracted State:
knife_1: Knife on countertop_1
bread_1: Bread, not sliced
Step-by-step Reasoning:
1. Go to the knife.
2. Slice the bread.
Predicted State Change: bread_1 becomes sliced.
Abstraction Comments:
1. A knife must be held to slice.
Optimized Demonstration Script:
```python
go_to(knife_1)
pickup(knife_1)
```
";

    #[test]
    fn canonical_abstraction() {
        let r = parse_response(TemplateId::Abstraction, CANON).unwrap();
        assert_eq!(r.sections.len(), 6);
        assert_eq!(r.items(Section::AbstractedState).len(), 2);
        assert_eq!(r.items(Section::Plan).len(), 2);
        assert_eq!(r.sections[&Section::Program], Body::Code("go_to(knife_1)\npickup(knife_1)".into()));
        assert!(r.item_errors.is_empty());
    }

    #[test]
    fn missing_summary() {
        let text = CANON.replace("Summary: The agent slices bread.\n", "");
        let err = parse_response(TemplateId::Abstraction, &text).unwrap_err();
        assert_eq!(err.missing_sections, vec!["Summary"]);
    }

    #[test]
    fn two_comments() {
        let r = parse_response(TemplateId::SelfEval, "Choice: 2\nAbstraction Comments:\n1. A\n2. B").unwrap();
        assert_eq!(r.items(Section::AbstractionComments), vec!["A", "B"]);
    }

    #[test]
    fn tolerant_headers() {
        let text = "Here you go.\n## 1. **Summary:** slicing\n**Explain**: it failed\n### Correction Abstraction\n- one\n- two\n4) Revised Action: ```click [41]```";
        let r = parse_response(TemplateId::HitlRevision, text).unwrap();
        assert_eq!(r.text(Section::Summary).unwrap(), "slicing");
        assert_eq!(r.text(Section::Explain).unwrap(), "it failed");
        assert_eq!(r.items(Section::CorrectionAbstraction), vec!["one", "two"]);
        assert_eq!(r.sections[&Section::Program], Body::Code("click [41]".into()));
    }

    #[test]
    fn headers_inside_fence_are_code() {
        let text = "Choice: 1\nJustification:\n```\nSummary: not a header\n```";
        let r = parse_response(TemplateId::SelfEval, text).unwrap();
        assert!(!r.sections.contains_key(&Section::Summary));
    }

    #[test]
    fn unmarked_line_in_list_is_flagged() {
        let r = parse_response(TemplateId::SelfEval, "Choice: 1\nAbstraction Comments:\n1. a\nstray").unwrap();
        assert_eq!(r.items(Section::AbstractionComments), vec!["a", "stray"]);
        assert_eq!(r.item_errors.len(), 1);
    }
}
