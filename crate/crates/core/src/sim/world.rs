//! World state, object categories and the single-step transition function.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Action, ActionApi, AttrValue, Observation, ParamKind, SkillSpec, StateElement};

pub const ATTRIBUTES: &[&str] =
    &["parent", "open", "on", "dirty", "filled", "sliced", "cooked", "watered", "location", "holding"];

/// Id of the pseudo-element describing the agent in observations.
pub const AGENT_ID: &str = "agent";

pub fn household_api() -> ActionApi {
    use ParamKind::*;
    ActionApi {
        skills: vec![
            SkillSpec::new("go_to", &[Object], "move next to object X; fails if X is inside a closed container"),
            SkillSpec::new("pickup", &[Object], "pick up object X; the agent holds at most one object"),
            SkillSpec::new("place", &[Object, Receptacle], "put the held object X into or onto receptacle Y"),
            SkillSpec::new("open", &[Receptacle], "open container X"),
            SkillSpec::new("close", &[Receptacle], "close container X"),
            SkillSpec::new("toggle_on", &[Object], "switch on appliance X"),
            SkillSpec::new("toggle_off", &[Object], "switch off appliance X"),
            SkillSpec::new("slice", &[Object], "slice food item X into pieces"),
            SkillSpec::new("pour", &[Object, Object], "pour the contents of the held container X into Y"),
            SkillSpec::new("stop", &[], "declare the task finished"),
        ],
        attributes: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Traits {
    pub pickupable: bool,
    pub receptacle: bool,
    pub openable: bool,
    pub toggleable: bool,
    pub dishware: bool,
    pub fillable: bool,
    pub sliceable: bool,
    pub cookable: bool,
}

pub fn traits(category: &str) -> Traits {
    let mut t = Traits::default();
    match category {
        "CounterTop" | "DiningTable" | "SinkBasin" | "Sofa" | "SideTable" | "Shelf" => t.receptacle = true,
        "Fridge" | "Cabinet" | "Drawer" => {
            t.receptacle = true;
            t.openable = true;
        }
        "Microwave" => {
            t.receptacle = true;
            t.openable = true;
            t.toggleable = true;
        }
        "Toaster" | "CoffeeMachine" | "StoveBurner" => {
            t.receptacle = true;
            t.toggleable = true;
        }
        "Faucet" => t.toggleable = true,
        "HousePlant" => {}
        "Plate" | "Pan" => {
            t.pickupable = true;
            t.receptacle = true;
            t.dishware = true;
        }
        "Bowl" | "Pot" => {
            t.pickupable = true;
            t.receptacle = true;
            t.dishware = true;
            t.fillable = true;
        }
        "Mug" | "Cup" => {
            t.pickupable = true;
            t.dishware = true;
            t.fillable = true;
        }
        "Box" => {
            t.pickupable = true;
            t.receptacle = true;
        }
        "Bread" | "Lettuce" | "Tomato" | "Apple" => {
            t.pickupable = true;
            t.sliceable = true;
        }
        "Potato" => {
            t.pickupable = true;
            t.sliceable = true;
            t.cookable = true;
        }
        "Egg" | "BreadSliced" | "PotatoSliced" => {
            t.pickupable = true;
            t.cookable = true;
        }
        _ => t.pickupable = true,
    }
    t
}

/// Number of pieces produced by slicing an item of this category.
fn slice_count(category: &str) -> usize {
    if category == "Bread" {
        3
    } else {
        2
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub location: Option<String>,
    pub held: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, StateElement>,
    pub agent: AgentState,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCode {
    UnknownObject,
    UnknownSkill,
    BadArity,
    NotPickupable,
    OutOfReach,
    InsideClosed,
    HandsFull,
    NotHolding,
    NotReceptacle,
    ReceptacleClosed,
    ToasterFull,
    StoveNeedsCookware,
    NotOpenable,
    NotToggleable,
    MicrowaveDoorOpen,
    DirtyContainer,
    NeedsKnife,
    NotSliceable,
    AlreadySliced,
    EmptyContainer,
    CannotPour,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFailure {
    pub code: FailureCode,
    pub message: String,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn fail<T>(code: FailureCode, message: impl Into<String>) -> Result<T, StepFailure> {
    Err(StepFailure { code, message: message.into() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub ok: bool,
    pub failure_reason: Option<StepFailure>,
    pub new_state: WorldState,
}

impl WorldState {
    pub fn get(&self, id: &str) -> Option<&StateElement> {
        self.objects.get(id)
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.objects.get(id)?.attributes.get("parent")?.as_text()
    }

    pub fn children(&self, id: &str) -> Vec<&str> {
        self.objects.keys().filter(|k| self.parent(k) == Some(id)).map(String::as_str).collect()
    }

    pub fn flag(&self, id: &str, attr: &str) -> bool {
        self.objects.get(id).and_then(|e| e.attributes.get(attr)).and_then(AttrValue::as_bool).unwrap_or(false)
    }

    fn category(&self, id: &str) -> &str {
        self.objects.get(id).map(|e| e.category.as_str()).unwrap_or("")
    }

    /// Top-level ancestor (the fixture the object ultimately rests in).
    pub fn anchor<'a>(&'a self, id: &'a str) -> &'a str {
        let mut cur = id;
        let mut guard = 0;
        while let Some(p) = self.parent(cur) {
            cur = p;
            guard += 1;
            if guard > 64 {
                break;
            }
        }
        cur
    }

    /// The closest closed container enclosing `id`, if any.
    pub fn closed_ancestor(&self, id: &str) -> Option<&str> {
        let mut cur = self.parent(id);
        while let Some(p) = cur {
            if traits(self.category(p)).openable && !self.flag(p, "open") {
                return Some(p);
            }
            cur = self.parent(p);
        }
        None
    }

    pub fn is_near(&self, id: &str) -> bool {
        self.agent.held.as_deref() == Some(id) || self.agent.location.as_deref() == Some(self.anchor(id))
    }

    fn set(&mut self, id: &str, attr: &str, value: AttrValue) {
        if let Some(e) = self.objects.get_mut(id) {
            e.attributes.insert(attr.to_string(), value);
        }
    }

    /// Everything transitively inside `id`.
    pub fn descendants(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for c in self.children(&cur) {
                out.push(c.to_string());
                stack.push(c.to_string());
            }
        }
        out
    }

    /// Observation of this state: every object plus the agent pseudo-element.
    pub fn observe(&self, step_index: u32, interacted: &BTreeSet<String>) -> Observation {
        let mut textual_state: Vec<StateElement> = self
            .objects
            .values()
            .map(|e| {
                let mut e = e.clone();
                e.interacted = interacted.contains(&e.element_id);
                e
            })
            .collect();
        let mut attrs = BTreeMap::new();
        attrs.insert(
            "location".to_string(),
            AttrValue::Text(self.agent.location.clone().unwrap_or_else(|| "start".into())),
        );
        attrs.insert(
            "holding".to_string(),
            AttrValue::Text(self.agent.held.clone().unwrap_or_else(|| "nothing".into())),
        );
        textual_state.push(StateElement {
            element_id: AGENT_ID.into(),
            category: "Agent".into(),
            attributes: attrs,
            interacted: false,
        });
        Observation { step_index, image_ref: None, textual_state, action_failure: None }
    }

    /// Text rendering of the state as shown in deployment prompts.
    pub fn render(&self) -> String {
        self.observe(0, &BTreeSet::new()).render_state()
    }
}

/// Applies one action. Failed actions leave the state untouched.
pub fn step(state: &WorldState, action: &Action) -> StepResult {
    let mut next = state.clone();
    match apply(&mut next, action) {
        Ok(()) => StepResult { ok: true, failure_reason: None, new_state: next },
        Err(f) => StepResult { ok: false, failure_reason: Some(f), new_state: state.clone() },
    }
}

fn arity(action: &Action, n: usize) -> Result<(), StepFailure> {
    if action.arguments.len() != n {
        return fail(
            FailureCode::BadArity,
            format!("{} takes {} arguments but got {}", action.skill, n, action.arguments.len()),
        );
    }
    Ok(())
}

fn exists(s: &WorldState, id: &str) -> Result<(), StepFailure> {
    if s.objects.contains_key(id) {
        Ok(())
    } else {
        fail(FailureCode::UnknownObject, format!("there is no object called {id}"))
    }
}

fn reachable(s: &WorldState, id: &str) -> Result<(), StepFailure> {
    if let Some(c) = s.closed_ancestor(id) {
        return fail(FailureCode::InsideClosed, format!("{id} is inside {c}, which is closed; open it first"));
    }
    if !s.is_near(id) {
        return fail(FailureCode::OutOfReach, format!("{id} is not within reach; go to it first"));
    }
    Ok(())
}

fn apply(s: &mut WorldState, a: &Action) -> Result<(), StepFailure> {
    let args = &a.arguments;
    match a.skill.as_str() {
        "go_to" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            if s.agent.held.as_deref() == Some(x.as_str()) {
                return Ok(());
            }
            if let Some(c) = s.closed_ancestor(x) {
                return fail(FailureCode::InsideClosed, format!("{x} is inside {c}, which is closed; open it first"));
            }
            s.agent.location = Some(s.anchor(x).to_string());
            Ok(())
        }
        "pickup" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            if !traits(s.category(x)).pickupable {
                return fail(FailureCode::NotPickupable, format!("{x} cannot be picked up"));
            }
            if let Some(h) = &s.agent.held {
                if h == x {
                    return Ok(());
                }
                return fail(
                    FailureCode::HandsFull,
                    format!("hands are full; the agent can hold only one object at a time and is holding {h}"),
                );
            }
            reachable(s, x)?;
            if let Some(e) = s.objects.get_mut(x) {
                e.attributes.remove("parent");
            }
            s.agent.held = Some(x.clone());
            Ok(())
        }
        "place" => {
            arity(a, 2)?;
            let (x, y) = (&args[0], &args[1]);
            exists(s, x)?;
            exists(s, y)?;
            if s.agent.held.as_deref() != Some(x.as_str()) {
                return fail(FailureCode::NotHolding, format!("the agent is not holding {x}"));
            }
            let ycat = s.category(y).to_string();
            let yt = traits(&ycat);
            if !yt.receptacle || x == y {
                return fail(FailureCode::NotReceptacle, format!("{y} cannot hold objects"));
            }
            if s.descendants(x).iter().any(|d| d == y) {
                return fail(FailureCode::NotReceptacle, format!("{y} is inside {x}"));
            }
            reachable(s, y)?;
            if yt.openable && !s.flag(y, "open") {
                return fail(FailureCode::ReceptacleClosed, format!("{y} is closed; open it first"));
            }
            if ycat == "Toaster" && !s.children(y).is_empty() {
                return fail(
                    FailureCode::ToasterFull,
                    format!("{y} is full and can only hold one slice of bread at a time"),
                );
            }
            if ycat == "StoveBurner" && !matches!(s.category(x), "Pan" | "Pot") {
                return fail(FailureCode::StoveNeedsCookware, format!("only a pan or pot can be placed on {y}"));
            }
            s.set(x, "parent", AttrValue::Text(y.clone()));
            s.agent.held = None;
            Ok(())
        }
        "open" | "close" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            if !traits(s.category(x)).openable {
                return fail(FailureCode::NotOpenable, format!("{x} cannot be opened or closed"));
            }
            reachable(s, x)?;
            s.set(x, "open", AttrValue::Bool(a.skill == "open"));
            Ok(())
        }
        "toggle_on" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            let cat = s.category(x).to_string();
            if !traits(&cat).toggleable {
                return fail(FailureCode::NotToggleable, format!("{x} cannot be switched on"));
            }
            reachable(s, x)?;
            toggle_on(s, x, &cat)
        }
        "toggle_off" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            if !traits(s.category(x)).toggleable {
                return fail(FailureCode::NotToggleable, format!("{x} cannot be switched off"));
            }
            reachable(s, x)?;
            s.set(x, "on", AttrValue::Bool(false));
            Ok(())
        }
        "slice" => {
            arity(a, 1)?;
            let x = &args[0];
            exists(s, x)?;
            let cat = s.category(x).to_string();
            if !traits(&cat).sliceable {
                return fail(FailureCode::NotSliceable, format!("{x} cannot be sliced"));
            }
            let holding_knife = s.agent.held.as_deref().map(|h| s.category(h) == "Knife").unwrap_or(false);
            if !holding_knife {
                return fail(FailureCode::NeedsKnife, "slicing requires holding a knife");
            }
            reachable(s, x)?;
            if s.flag(x, "sliced") {
                return fail(FailureCode::AlreadySliced, format!("{x} is already sliced"));
            }
            let parent = s.parent(x).map(str::to_string);
            s.set(x, "sliced", AttrValue::Bool(true));
            let slice_cat = format!("{cat}Sliced");
            for k in 1..=slice_count(&cat) {
                let id = format!("{x}_slice_{k}");
                let mut attributes = BTreeMap::new();
                if let Some(p) = &parent {
                    attributes.insert("parent".to_string(), AttrValue::Text(p.clone()));
                }
                if traits(&slice_cat).cookable {
                    attributes.insert("cooked".to_string(), AttrValue::Bool(false));
                }
                s.objects.insert(
                    id.clone(),
                    StateElement { element_id: id, category: slice_cat.clone(), attributes, interacted: false },
                );
            }
            Ok(())
        }
        "pour" => {
            arity(a, 2)?;
            let (x, y) = (&args[0], &args[1]);
            exists(s, x)?;
            exists(s, y)?;
            if s.agent.held.as_deref() != Some(x.as_str()) {
                return fail(FailureCode::NotHolding, format!("the agent is not holding {x}"));
            }
            let filled = s.get(x).and_then(|e| e.attr("filled")).and_then(AttrValue::as_text).unwrap_or("none");
            if !traits(s.category(x)).fillable || filled == "none" {
                return fail(FailureCode::EmptyContainer, format!("{x} is empty; fill it with water at the sink first"));
            }
            let filled = filled.to_string();
            reachable(s, y)?;
            let ycat = s.category(y).to_string();
            if ycat == "HousePlant" {
                s.set(y, "watered", AttrValue::Bool(true));
            } else if traits(&ycat).fillable {
                s.set(y, "filled", AttrValue::Text(filled));
            } else {
                return fail(FailureCode::CannotPour, format!("cannot pour into {y}"));
            }
            s.set(x, "filled", AttrValue::Text("none".into()));
            Ok(())
        }
        "stop" => {
            arity(a, 0)?;
            Ok(())
        }
        other => fail(FailureCode::UnknownSkill, format!("{other} is not a known skill")),
    }
}

fn toggle_on(s: &mut WorldState, x: &str, cat: &str) -> Result<(), StepFailure> {
    let contents: Vec<String> = s.children(x).into_iter().map(str::to_string).collect();
    match cat {
        "Microwave" => {
            if s.flag(x, "open") {
                return fail(
                    FailureCode::MicrowaveDoorOpen,
                    format!("the {x} door must be closed before turning it on"),
                );
            }
            for c in &contents {
                cook(s, c);
            }
        }
        "CoffeeMachine" => {
            for c in &contents {
                if traits(s.category(c)).fillable && s.flag(c, "dirty") {
                    return fail(
                        FailureCode::DirtyContainer,
                        format!("{c} is dirty; rinse it in the sink before making coffee"),
                    );
                }
            }
            for c in &contents {
                if traits(s.category(c)).fillable {
                    s.set(c, "filled", AttrValue::Text("coffee".into()));
                }
            }
        }
        "Faucet" => {
            if let Some(sink) = s.parent(x).map(str::to_string) {
                for c in s.children(&sink).into_iter().map(str::to_string).collect::<Vec<_>>() {
                    if c == x {
                        continue;
                    }
                    let t = traits(s.category(&c));
                    if t.dishware {
                        s.set(&c, "dirty", AttrValue::Bool(false));
                    }
                    if t.fillable {
                        s.set(&c, "filled", AttrValue::Text("water".into()));
                    }
                }
            }
        }
        "Toaster" => {
            for c in &contents {
                cook(s, c);
            }
        }
        "StoveBurner" => {
            for vessel in &contents {
                let vcat = s.category(vessel).to_string();
                let water = s.get(vessel).and_then(|e| e.attr("filled")).and_then(AttrValue::as_text) == Some("water");
                if vcat == "Pan" || (vcat == "Pot" && water) {
                    for c in s.children(vessel).into_iter().map(str::to_string).collect::<Vec<_>>() {
                        cook(s, &c);
                    }
                }
            }
        }
        _ => {}
    }
    s.set(x, "on", AttrValue::Bool(true));
    Ok(())
}

fn cook(s: &mut WorldState, id: &str) {
    if traits(s.category(id)).cookable {
        s.set(id, "cooked", AttrValue::Bool(true));
    }
}
