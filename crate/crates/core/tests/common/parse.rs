//! Response generators and the golden corpus checker.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ical::model::{Action, ActionApi};
use ical::prompt::{parse_action_program, parse_response, Body, ParsedResponse, Section, TemplateId};
use ical::sim::household_api;
use proptest::prelude::*;
use serde::Deserialize;

const SECTIONS: [Section; 11] = [
    Section::Summary,
    Section::AbstractedState,
    Section::Plan,
    Section::PredictedState,
    Section::AbstractionComments,
    Section::Program,
    Section::Explain,
    Section::CorrectionAbstraction,
    Section::Instruction,
    Section::Choice,
    Section::Justification,
];

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-zA-Z0-9][a-zA-Z0-9_]{0,7}", 1..8).prop_map(|w| w.join(" "))
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(words(), 0..4).prop_map(|l| l.join("\n"))
}

fn code() -> impl Strategy<Value = String> {
    let line = ("(    )?", "[a-z_]{1,8}", "[A-Za-z0-9_, ]{0,12}").prop_map(|(pad, f, a)| format!("{pad}{f}({a})"));
    prop::collection::vec(line, 1..6).prop_map(|l| l.join("\n"))
}

fn body(section: Section) -> BoxedStrategy<Body> {
    if section == Section::Program {
        prop_oneof![code().prop_map(Body::Code), text().prop_map(Body::Text)].boxed()
    } else if section.is_list() {
        prop::collection::vec(words(), 0..5).prop_map(Body::List).boxed()
    } else {
        text().prop_map(Body::Text).boxed()
    }
}

pub fn response() -> impl Strategy<Value = ParsedResponse> {
    prop::sample::select(TemplateId::ALL.to_vec()).prop_flat_map(|template| {
        let parts: Vec<_> = SECTIONS
            .iter()
            .map(|&s| {
                let required = template.required_sections().contains(&s);
                (any::<bool>(), body(s)).prop_map(move |(keep, b)| (keep || required).then_some((s, b)))
            })
            .collect();
        parts.prop_map(move |parts| {
            let mut r = ParsedResponse::new(template);
            r.sections = parts.into_iter().flatten().collect();
            r
        })
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub template: TemplateId,
    #[serde(default)]
    api: Option<String>,
    #[serde(default)]
    missing: Vec<String>,
    #[serde(default)]
    item_errors: usize,
    #[serde(default)]
    section_count: Option<usize>,
    #[serde(default)]
    text: BTreeMap<Section, String>,
    #[serde(default)]
    lists: BTreeMap<Section, Vec<String>>,
    #[serde(default)]
    program: Option<ProgramExpectation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramExpectation {
    kind: String,
    actions: Vec<String>,
    #[serde(default)]
    guarded: usize,
    #[serde(default)]
    state_changes: usize,
    #[serde(default)]
    bindings: usize,
    #[serde(default)]
    line_errors: usize,
    #[serde(default)]
    flags: usize,
}

pub fn golden_cases() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    v.sort();
    v
}

pub fn check_golden(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let exp: Expectation = toml::from_str(&std::fs::read_to_string(path.with_extension("toml")).map_err(|e| e.to_string())?)
        .map_err(|e| format!("expectation: {e}"))?;
    let parsed = parse_response(exp.template, &text);
    if !exp.missing.is_empty() {
        return match parsed {
            Err(e) if e.missing_sections == exp.missing => Ok(()),
            Err(e) => Err(format!("missing {:?}, expected {:?}", e.missing_sections, exp.missing)),
            Ok(_) => Err("parsed although sections are missing".into()),
        };
    }
    let r = parsed.map_err(|e| e.to_string())?;
    if r.item_errors.len() != exp.item_errors {
        return Err(format!("{} item errors, expected {}", r.item_errors.len(), exp.item_errors));
    }
    if let Some(n) = exp.section_count {
        if r.sections.len() != n {
            return Err(format!("{} sections, expected {n}", r.sections.len()));
        }
    }
    for (s, want) in &exp.text {
        match r.sections.get(s) {
            Some(Body::Text(got)) if got == want => {}
            other => return Err(format!("{s:?}: got {other:?}, expected text {want:?}")),
        }
    }
    for (s, want) in &exp.lists {
        match r.sections.get(s) {
            Some(Body::List(got)) if got == want => {}
            other => return Err(format!("{s:?}: got {other:?}, expected list {want:?}")),
        }
    }
    if let Some(p) = &exp.program {
        let kind = match r.sections.get(&Section::Program) {
            Some(Body::Code(_)) => "code",
            Some(Body::Text(_)) => "text",
            Some(Body::List(_)) => "list",
            None => return Err("no program section".into()),
        };
        if kind != p.kind {
            return Err(format!("program is {kind}, expected {}", p.kind));
        }
        let api = match exp.api.as_deref() {
            Some("web") => ActionApi::web(),
            _ => household_api(),
        };
        let prog = parse_action_program(&r.program_text().unwrap(), &api).map_err(|e| e.to_string())?;
        let calls: Vec<String> = prog.actions.iter().map(Action::call_text).collect();
        if calls != p.actions {
            return Err(format!("actions {calls:?}\nexpected {:?}", p.actions));
        }
        let counts = [
            ("guarded", prog.actions.iter().filter(|a| a.guard.is_some()).count(), p.guarded),
            ("state changes", prog.state_changes.len(), p.state_changes),
            ("bindings", prog.bindings.len(), p.bindings),
            ("line errors", prog.errors.len(), p.line_errors),
            ("flags", prog.flags.len(), p.flags),
        ];
        for (what, got, want) in counts {
            if got != want {
                return Err(format!("{got} {what}, expected {want}"));
            }
        }
    }
    Ok(())
}
