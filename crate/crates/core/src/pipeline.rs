//! End-to-end drivers: generate demonstrations, learn examples from them,
//! build the raw-demonstration baseline memory, evaluate and sweep memory
//! sizes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::abstraction::{abstract_demo, AbstractionConfig, AbstractionError};
use crate::deploy::{evaluate_suite, DeployConfig, SuiteReport};
use crate::engine::Engine;
use crate::hitl::{run_hitl, FeedbackSource, HitlConfig, SessionStatus};
use crate::memory::{MemoryError, MemoryStore};
use crate::model::{AbstractionSet, Example, ExampleStatus, Instruction, Trajectory};
use crate::sim::{generate_noisy_demo, Catalog, NoiseProfile, Split, TaskSpec};

/// One recorded demonstration of a catalog task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub task_id: String,
    pub seed: u64,
    pub trajectory: Trajectory,
}

impl DemoRecord {
    pub fn example_id(&self) -> String {
        format!("{}-s{}", self.task_id, self.seed)
    }
}

pub const DOMAIN_TAG: &str = "household";

pub fn instruction_for(task: &TaskSpec) -> Instruction {
    Instruction::new(task.task_id.clone(), task.instruction_text.clone(), DOMAIN_TAG)
}

/// `n` noisy demonstrations of `split` tasks, interleaved across families
/// and cycling through the split again when `n` exceeds it. Demo `i` uses
/// world seed `seed + i`.
pub fn generate_demos(catalog: &Catalog, split: Split, n: usize, seed: u64, noise: NoiseProfile) -> Vec<DemoRecord> {
    catalog
        .interleaved(split, usize::MAX)
        .into_iter()
        .cycle()
        .take(n)
        .enumerate()
        .map(|(i, t)| {
            let s = seed + i as u64;
            DemoRecord { task_id: t.task_id.clone(), seed: s, trajectory: generate_noisy_demo(t, s, noise) }
        })
        .collect()
}

pub fn write_demos(path: &Path, demos: &[DemoRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in demos {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

/// Reads a JSONL demo file. Lines that do not parse are counted and skipped.
pub fn read_demos(path: &Path) -> std::io::Result<(Vec<DemoRecord>, usize)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut bad = 0;
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(d) => out.push(d),
            Err(e) => {
                tracing::warn!("{}:{}: skipping demo record: {e}", path.display(), i + 1);
                bad += 1;
            }
        }
    }
    Ok((out, bad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub abstraction: AbstractionConfig,
    pub hitl: HitlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub example_id: String,
    pub task_id: String,
    pub family: String,
    /// accepted, exhausted, aborted or skipped.
    pub status: String,
    pub feedback_rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relabeled: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnFamilyRow {
    pub family: String,
    pub demos: usize,
    pub accepted: usize,
    pub exhausted: usize,
    pub relabeled: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub demos: usize,
    pub accepted: usize,
    pub exhausted: usize,
    pub relabeled: usize,
    pub skipped: usize,
    pub aborted: usize,
    /// Demo records that could not be read or named an unknown task.
    pub unreadable: usize,
    pub families: Vec<LearnFamilyRow>,
    pub sessions: Vec<SessionSummary>,
}

impl LearnSummary {
    fn from_sessions(sessions: Vec<SessionSummary>, unreadable: usize) -> Self {
        let mut s = LearnSummary { demos: sessions.len(), unreadable, ..Default::default() };
        let mut fam: BTreeMap<String, LearnFamilyRow> = BTreeMap::new();
        for x in &sessions {
            let row = fam.entry(x.family.clone()).or_insert_with(|| LearnFamilyRow { family: x.family.clone(), ..Default::default() });
            row.demos += 1;
            match x.status.as_str() {
                "accepted" => {
                    s.accepted += 1;
                    row.accepted += 1;
                }
                "exhausted" => {
                    s.exhausted += 1;
                    row.exhausted += 1;
                }
                "aborted" => s.aborted += 1,
                _ => {
                    s.skipped += 1;
                    row.skipped += 1;
                }
            }
            if x.relabeled.is_some() {
                s.relabeled += 1;
                row.relabeled += 1;
            }
        }
        s.families = fam.into_values().collect();
        s.sessions = sessions;
        s
    }

    pub fn table(&self) -> String {
        let width = self.families.iter().map(|f| f.family.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "accepted {}  exhausted {}  relabeled {}  skipped {}  aborted {}  (of {} demos",
            self.accepted, self.exhausted, self.relabeled, self.skipped, self.aborted, self.demos
        );
        if self.unreadable > 0 {
            let _ = write!(out, ", {} unreadable", self.unreadable);
        }
        out.push_str(")\n");
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>8}  {:>9}  {:>9}  {:>7}", "family", "demos", "accepted", "exhausted", "relabeled", "skipped");
        for f in &self.families {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>8}  {:>9}  {:>9}  {:>7}",
                f.family, f.demos, f.accepted, f.exhausted, f.relabeled, f.skipped
            );
        }
        out
    }
}

/// Abstracts every demonstration and verifies it with feedback, growing
/// `engine.memory` as examples are accepted. Demos run in order, so later
/// demos retrieve what earlier ones stored.
pub fn learn(
    engine: &Engine,
    catalog: &Catalog,
    demos: &[DemoRecord],
    cfg: &LearnConfig,
    source: &mut dyn FeedbackSource,
) -> LearnSummary {
    let mut sessions = Vec::new();
    let mut unknown = 0;
    for d in demos {
        let Ok(task) = catalog.get(&d.task_id) else {
            tracing::warn!("demo names unknown task {}", d.task_id);
            unknown += 1;
            continue;
        };
        let id = d.example_id();
        let mut summary = SessionSummary {
            example_id: id.clone(),
            task_id: task.task_id.clone(),
            family: task.family.clone(),
            status: "skipped".into(),
            feedback_rounds: 0,
            relabeled: None,
            detail: None,
        };
        if engine.memory.get(&id).is_some() {
            summary.detail = Some("already stored".into());
            sessions.push(summary);
            continue;
        }
        let draft = match abstract_demo(engine, &instruction_for(task), &d.trajectory, &cfg.abstraction) {
            Ok(o) => o,
            Err(e) => {
                if !matches!(e, AbstractionError::ContentFiltered) {
                    tracing::warn!("{id}: {e}");
                }
                summary.detail = Some(e.to_string());
                sessions.push(summary);
                continue;
            }
        };
        let out = run_hitl(engine, &id, &draft, &d.trajectory, task, d.seed, cfg.hitl, source);
        summary.status = match out.status {
            SessionStatus::Accepted => "accepted",
            SessionStatus::Exhausted => "exhausted",
            _ => "aborted",
        }
        .into();
        summary.feedback_rounds = out.feedback_rounds;
        summary.relabeled = out.relabeled.map(|e| e.example_id);
        summary.detail = out.abort_cause;
        sessions.push(summary);
    }
    LearnSummary::from_sessions(sessions, unknown)
}

/// A memory of the demonstrations themselves, without abstraction or
/// verification.
pub fn raw_demo_memory(
    engine: &Engine,
    catalog: &Catalog,
    demos: &[DemoRecord],
) -> Result<MemoryStore, MemoryError> {
    let store = MemoryStore::in_memory(engine.embedder.id().to_string(), engine.embedder.dim());
    for d in demos {
        let Ok(task) = catalog.get(&d.task_id) else { continue };
        let example = Example {
            example_id: d.example_id(),
            instruction: instruction_for(task),
            trajectory: d.trajectory.clone(),
            abstractions: AbstractionSet::default(),
            embeddings: None,
            lineage: Vec::new(),
            status: ExampleStatus::RawDemo,
        };
        store.add(example, engine.embedder.as_ref())?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub memory_size: usize,
    pub report: SuiteReport,
}

/// Evaluates the same tasks with the first `n` stored examples for each `n`
/// in `sizes` (capped at the memory size).
pub fn sweep(
    engine: &Engine,
    tasks: &[TaskSpec],
    split: Option<Split>,
    sizes: &[usize],
    seed: u64,
    cfg: &DeployConfig,
) -> Vec<SweepPoint> {
    sizes
        .iter()
        .map(|&n| {
            let n = n.min(engine.memory.len());
            let e = engine.with_memory(Arc::new(engine.memory.subset(n)));
            SweepPoint { memory_size: n, report: evaluate_suite(&e, &format!("|M|={n}"), tasks, split, seed, cfg) }
        })
        .collect()
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut out = format!("{:>8}  {:>8}  {:>6}  {:>6}\n", "|M|", "episodes", "SR", "GC");
    for p in points {
        let _ = writeln!(out, "{:>8}  {:>8}  {:>6.1}  {:>6.1}", p.memory_size, p.report.episodes, p.report.sr, p.report.gc);
    }
    out
}
