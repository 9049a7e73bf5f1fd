//! Noisy demonstration generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{execute, ExecOptions, Outcome};
use super::task::TaskSpec;
use super::world::{step, traits};
use crate::model::{Action, Trajectory, TrajectoryKind, TrajectorySource};

/// Per-position rates of the four kinds of demonstration noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Redundant repeated movement after an action.
    pub insertion: f64,
    /// Look-around detour to another fixture and back.
    pub detour: f64,
    /// Two adjacent actions performed in the wrong order.
    pub swap: f64,
    /// Probability that the demonstrator quits before finishing.
    pub termination: f64,
}

impl NoiseProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn typical() -> Self {
        Self { insertion: 0.15, detour: 0.1, swap: 0.05, termination: 0.0 }
    }
}

fn stream(seed: u64, kind: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The expert's flat action sequence for this world (guards resolved).
pub fn expert_actions(task: &TaskSpec, seed: u64) -> Vec<Action> {
    let program = super::reference_program(task);
    let trace = execute(&task.reset(seed), &program, ExecOptions { max_steps: usize::MAX, halt_on_failure: true });
    trace
        .entries
        .iter()
        .filter(|e| e.outcome == Outcome::Ok)
        .map(|e| {
            let mut a = e.action.clone();
            a.guard = None;
            a.raw_text = a.call_text();
            a
        })
        .collect()
}

/// Generates a demonstration by perturbing the expert sequence. Each noise
/// kind draws from its own random stream, one draw per position regardless of
/// the rate, so raising one rate only ever adds perturbations of that kind.
pub fn generate_noisy_demo(task: &TaskSpec, seed: u64, noise: NoiseProfile) -> Trajectory {
    let initial = task.reset(seed);
    let mut seq = expert_actions(task, seed);

    let mut swaps = stream(seed, 1);
    for i in 0..seq.len().saturating_sub(1) {
        let u: f64 = swaps.random();
        if u < noise.swap {
            seq.swap(i, i + 1);
        }
    }

    let fixtures: Vec<String> = initial
        .objects
        .values()
        .filter(|e| !e.attributes.contains_key("parent") && !traits(&e.category).pickupable)
        .map(|e| e.element_id.clone())
        .collect();
    let mut ins = stream(seed, 2);
    let mut det = stream(seed, 3);
    let mut state = initial.clone();
    let mut noisy = Vec::new();
    for a in seq {
        state = step(&state, &a).new_state;
        noisy.push(a);
        let u_ins: f64 = ins.random();
        let u_det: f64 = det.random();
        let pick = det.random_range(0..fixtures.len().max(1));
        let here = state.agent.location.clone();
        if u_ins < noise.insertion {
            if let Some(loc) = &here {
                noisy.push(Action::new("go_to", &[loc]));
            }
        }
        if u_det < noise.detour && !fixtures.is_empty() {
            noisy.push(Action::new("go_to", &[&fixtures[pick]]));
            if let Some(loc) = &here {
                noisy.push(Action::new("go_to", &[loc]));
            }
            let away = step(&state, &Action::new("go_to", &[&fixtures[pick]])).new_state;
            state = match &here {
                Some(loc) => step(&away, &Action::new("go_to", &[loc])).new_state,
                None => away,
            };
        }
    }

    let mut term = stream(seed, 4);
    let u_term: f64 = term.random();
    let u_pos: f64 = term.random();
    let lenient = ExecOptions { max_steps: usize::MAX, halt_on_failure: false };
    if u_term < noise.termination && !noisy.is_empty() {
        let trace = execute(&initial, &noisy, lenient);
        let mut fractions = vec![task.score(&initial, 0).goal_fraction];
        fractions.extend(trace.entries.iter().map(|e| task.score(&e.state_after, 0).goal_fraction));
        let cut = if *fractions.last().unwrap() < 1.0 {
            ((u_pos * noisy.len() as f64) as usize).min(noisy.len() - 1)
        } else {
            // `k` is the action whose effect completed the last goal.
            let k = (1..fractions.len()).rev().find(|&i| fractions[i] != fractions[i - 1]).unwrap_or(1) - 1;
            let lo = k / 2;
            let p = lo + ((u_pos * (k - lo + 1) as f64) as usize).min(k - lo);
            if fractions[p] < 1.0 {
                p
            } else {
                k
            }
        };
        noisy.truncate(cut);
    }

    let trace = execute(&initial, &noisy, lenient);
    trace.to_trajectory(TrajectoryKind::Noisy, TrajectorySource::HumanDemo)
}
