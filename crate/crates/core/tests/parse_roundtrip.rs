mod common;

use common::parse::{check_golden, golden_cases, response, Expectation};
use ical::model::{Action, AttrValue, Condition, StateChange};
use ical::prompt::{parse_action_program, parse_response, render_program, render_response};
use ical::sim::household_api;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn render_then_parse_is_identity(r in response()) {
        let text = render_response(&r);
        let back = parse_response(r.template, &text).unwrap();
        prop_assert_eq!(back, r);
    }
}

fn household_actions() -> impl Strategy<Value = (Vec<Action>, Vec<StateChange>)> {
    let api = household_api();
    let skills: Vec<(String, usize)> = api.skills.iter().map(|s| (s.name.clone(), s.arity())).collect();
    let call = (prop::sample::select(skills), prop::collection::vec("[A-Z][a-z]{2,6}_[0-9]{1,2}", 2));
    let guard = prop::option::of(("[A-Z][a-z]{2,6}_[0-9]", prop::sample::select(vec!["dirty", "open", "filled"]), any::<bool>()));
    let action = (call, guard, 1usize..4).prop_map(|(((skill, arity), args), guard, run)| {
        let guard = guard.map(|(e, a, v)| Condition { element: e, attribute: a.into(), value: AttrValue::Bool(v) });
        vec![Action { skill, arguments: args[..arity].to_vec(), raw_text: String::new(), guard }; run]
    });
    prop::collection::vec(action, 1..6).prop_flat_map(|runs| {
        let actions: Vec<Action> = runs.into_iter().flatten().collect();
        let n = actions.len() as u32;
        let change = (0..=n, "[A-Z][a-z]{2,6}_[0-9]", prop::sample::select(vec!["sliced", "cooked"]), any::<bool>()).prop_map(
            |(step_index, e, a, v)| StateChange { element_id: e, attribute: a.into(), before: None, after: AttrValue::Bool(v), step_index },
        );
        (Just(actions), prop::collection::vec(change, 0..3))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn program_render_then_parse_keeps_calls_and_guards((actions, mut changes) in household_actions()) {
        changes.sort_by_key(|c| c.step_index);
        let text = render_program(&actions, &changes);
        let parsed = parse_action_program(&text, &household_api()).unwrap();
        prop_assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
        prop_assert_eq!(parsed.actions.len(), actions.len());
        for (a, b) in parsed.actions.iter().zip(&actions) {
            prop_assert!(a.same_call(b), "{} vs {}", a, b);
        }
        prop_assert_eq!(parsed.state_changes, changes);
    }
}

#[test]
fn golden_corpus_matches_labels() {
    let cases = golden_cases();
    assert_eq!(cases.len(), 20);
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|p| check_golden(p).err().map(|e| format!("{}: {e}", p.file_name().unwrap().to_string_lossy())))
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n\n"));
}

#[test]
fn golden_responses_survive_canonical_rendering() {
    for p in golden_cases() {
        let exp: Expectation = toml::from_str(&std::fs::read_to_string(p.with_extension("toml")).unwrap()).unwrap();
        let Ok(r) = parse_response(exp.template, &std::fs::read_to_string(&p).unwrap()) else { continue };
        let mut clean = r.clone();
        clean.item_errors.clear();
        let back = parse_response(exp.template, &render_response(&r)).unwrap();
        assert_eq!(back, clean, "{}", p.display());
    }
}
