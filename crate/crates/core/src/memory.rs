//! Example memory: an append-only store of learned examples with their
//! embeddings, and weighted multi-modal nearest-neighbour retrieval.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Embedder};
use crate::image::ImageRef;
use crate::model::{EmbeddingBundle, Example};

const EXAMPLES_FILE: &str = "examples.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalWeights {
    pub instruction: f64,
    pub textual: f64,
    pub visual: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        Self { instruction: 0.6, textual: 0.2, visual: 0.2 }
    }
}

impl RetrievalWeights {
    pub fn scaled(self, c: f64) -> Self {
        Self { instruction: self.instruction * c, textual: self.textual * c, visual: self.visual * c }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    pub instruction_vec: Option<Vec<f64>>,
    pub textual_state_vec: Option<Vec<f64>>,
    pub visual_vec: Option<Vec<f64>>,
}

impl Query {
    /// Embeds the parts of a query that are present. Text that cannot be
    /// embedded (for instance empty) leaves that modality out.
    pub fn embed(embedder: &dyn Embedder, instruction: &str, textual_state: Option<&str>) -> Self {
        Self {
            instruction_vec: embedder.embed_text(instruction).ok(),
            textual_state_vec: textual_state.and_then(|s| embedder.embed_text(s).ok()),
            visual_vec: None,
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Per-modality similarities of a query to stored embeddings; a modality
/// missing on either side is 0.
pub fn components(q: &Query, e: &EmbeddingBundle) -> [f64; 3] {
    let term = |a: &Option<Vec<f64>>, b: Option<&Vec<f64>>| match (a, b) {
        (Some(a), Some(b)) => cosine(a, b),
        _ => 0.0,
    };
    [
        term(&q.instruction_vec, Some(&e.instruction_vec)),
        term(&q.textual_state_vec, Some(&e.textual_state_vec)),
        term(&q.visual_vec, e.visual_vec.as_ref()),
    ]
}

pub fn combine(c: [f64; 3], w: &RetrievalWeights) -> f64 {
    w.instruction * c[0] + w.textual * c[1] + w.visual * c[2]
}

pub fn score(q: &Query, e: &EmbeddingBundle, w: &RetrievalWeights) -> f64 {
    combine(components(q, e), w)
}

#[derive(Debug, Clone)]
pub struct Hit {
    pub example: Arc<Example>,
    pub s_instruction: f64,
    pub s_textual: f64,
    pub s_visual: f64,
    pub score: f64,
    /// Insertion position in the store.
    pub index: usize,
}

/// A retrieval request in text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub instruction_text: String,
    #[serde(default)]
    pub textual_state_text: Option<String>,
    #[serde(default)]
    pub image_ref: Option<ImageRef>,
}

impl RetrievalQuery {
    pub fn new(instruction_text: impl Into<String>, textual_state_text: Option<String>) -> Self {
        Self { instruction_text: instruction_text.into(), textual_state_text, image_ref: None }
    }

    pub fn embed(&self, embedder: &dyn Embedder) -> Query {
        let mut q = Query::embed(embedder, &self.instruction_text, self.textual_state_text.as_deref());
        q.visual_vec = self.image_ref.as_ref().and_then(|r| embedder.embed_image(r).ok());
        q
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("example {0} is already stored")]
    DuplicateId(String),
    #[error("example {0} has no embeddings")]
    MissingEmbeddings(String),
    #[error("example {id}: {reason}")]
    BadEmbeddings { id: String, reason: String },
    #[error("store was built with embedder {found} (dim {found_dim}), not {expected} (dim {expected_dim})")]
    EmbedderMismatch { found: String, found_dim: usize, expected: String, expected_dim: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] BackendError),
    #[error("corrupt store file {file} line {line}: {reason}")]
    Corrupt { file: String, line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    embedder_id: String,
    dim: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingLine {
    example_id: String,
    #[serde(flatten)]
    bundle: EmbeddingBundle,
}

#[derive(Default)]
struct Inner {
    examples: Vec<Arc<Example>>,
    ids: HashMap<String, usize>,
}

impl Inner {
    fn push(&mut self, e: Arc<Example>) {
        self.ids.insert(e.example_id.clone(), self.examples.len());
        self.examples.push(e);
    }
}

/// Append-only example memory, optionally persisted to a directory holding
/// `examples.jsonl`, an `embeddings.jsonl` sidecar and `manifest.json`.
pub struct MemoryStore {
    dir: Option<PathBuf>,
    embedder_id: String,
    dim: usize,
    inner: RwLock<Inner>,
}

/// Outcome of opening a store from disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// A final line cut short by an interrupted write.
    pub torn_tail: bool,
    pub compacted: bool,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, bool), MemoryError> {
    if !path.exists() {
        return Ok((Vec::new(), false));
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if Some(i) == last => torn = true,
            Err(e) => {
                return Err(MemoryError::Corrupt {
                    file: path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((out, torn))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl MemoryStore {
    pub fn in_memory(embedder_id: impl Into<String>, dim: usize) -> Self {
        Self { dir: None, embedder_id: embedder_id.into(), dim, inner: RwLock::new(Inner::default()) }
    }

    /// Opens (or creates) a store directory. A torn final line in either file
    /// is dropped, and the files are rewritten so that examples and
    /// embeddings agree.
    pub fn open(dir: impl Into<PathBuf>, embedder_id: &str, dim: usize) -> Result<(Self, LoadReport), MemoryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| MemoryError::Corrupt {
                file: manifest_path.display().to_string(),
                line: 1,
                reason: e.to_string(),
            })?;
            if m.embedder_id != embedder_id || m.dim != dim {
                return Err(MemoryError::EmbedderMismatch {
                    found: m.embedder_id,
                    found_dim: m.dim,
                    expected: embedder_id.to_string(),
                    expected_dim: dim,
                });
            }
        }
        let (examples, torn_a): (Vec<Example>, bool) = read_jsonl(&dir.join(EXAMPLES_FILE))?;
        let (embeddings, torn_b): (Vec<EmbeddingLine>, bool) = read_jsonl(&dir.join(EMBEDDINGS_FILE))?;
        let mut vecs: HashMap<String, EmbeddingBundle> =
            embeddings.into_iter().map(|l| (l.example_id, l.bundle)).collect();
        let store = Self::in_memory(embedder_id, dim);
        let mut dropped = false;
        {
            let mut inner = store.inner.write();
            for mut e in examples {
                match vecs.remove(&e.example_id) {
                    Some(b) if !inner.ids.contains_key(&e.example_id) => {
                        e.embeddings = Some(b);
                        inner.push(Arc::new(e));
                    }
                    _ => dropped = true,
                }
            }
            dropped |= !vecs.is_empty();
        }
        let store = Self { dir: Some(dir), ..store };
        let compact = torn_a || torn_b || dropped || !manifest_path.exists();
        if compact {
            store.compact()?;
        }
        let report = LoadReport { loaded: store.len(), torn_tail: torn_a || torn_b, compacted: compact };
        Ok((store, report))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inner.read().examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> Vec<Arc<Example>> {
        self.inner.read().examples.clone()
    }

    pub fn get(&self, id: &str) -> Option<Arc<Example>> {
        let inner = self.inner.read();
        inner.ids.get(id).map(|&i| inner.examples[i].clone())
    }

    /// Embeds and stores an example.
    pub fn add(&self, mut example: Example, embedder: &dyn Embedder) -> Result<Arc<Example>, MemoryError> {
        example.embeddings = Some(embed_example(&example, embedder)?);
        self.add_precomputed(example)
    }

    /// Stores an example whose embeddings are already filled in.
    pub fn add_precomputed(&self, example: Example) -> Result<Arc<Example>, MemoryError> {
        let b = example.embeddings.as_ref().ok_or_else(|| MemoryError::MissingEmbeddings(example.example_id.clone()))?;
        if b.dim != self.dim || b.provider_id != self.embedder_id {
            return Err(MemoryError::BadEmbeddings {
                id: example.example_id.clone(),
                reason: format!("embedded by {} (dim {}), store expects {} (dim {})", b.provider_id, b.dim, self.embedder_id, self.dim),
            });
        }
        b.check().map_err(|reason| MemoryError::BadEmbeddings { id: example.example_id.clone(), reason })?;
        let mut inner = self.inner.write();
        if inner.ids.contains_key(&example.example_id) {
            return Err(MemoryError::DuplicateId(example.example_id));
        }
        if let Some(dir) = &self.dir {
            let mut stripped = example.clone();
            let bundle = stripped.embeddings.take().expect("checked above");
            let line = EmbeddingLine { example_id: example.example_id.clone(), bundle };
            append_line(&dir.join(EMBEDDINGS_FILE), &serde_json::to_string(&line).expect("serializable"))?;
            append_line(&dir.join(EXAMPLES_FILE), &serde_json::to_string(&stripped).expect("serializable"))?;
            self.write_manifest(inner.examples.len() + 1)?;
        }
        let arc = Arc::new(example);
        inner.push(arc.clone());
        Ok(arc)
    }

    fn write_manifest(&self, count: usize) -> Result<(), MemoryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let m = Manifest { version: FORMAT_VERSION, embedder_id: self.embedder_id.clone(), dim: self.dim, count };
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&m).expect("serializable"))?;
        Ok(())
    }

    /// Rewrites the store files from memory via temporary files and renames.
    pub fn compact(&self) -> Result<(), MemoryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let inner = self.inner.read();
        let mut ex = String::new();
        let mut emb = String::new();
        for e in &inner.examples {
            let mut stripped = (**e).clone();
            let bundle = stripped.embeddings.take().expect("stored examples carry embeddings");
            ex.push_str(&serde_json::to_string(&stripped).expect("serializable"));
            ex.push('\n');
            emb.push_str(&serde_json::to_string(&EmbeddingLine { example_id: e.example_id.clone(), bundle }).expect("serializable"));
            emb.push('\n');
        }
        write_atomic(&dir.join(EMBEDDINGS_FILE), emb.as_bytes())?;
        write_atomic(&dir.join(EXAMPLES_FILE), ex.as_bytes())?;
        self.write_manifest(inner.examples.len())
    }

    /// The `k` best examples for a query, best first; equal scores keep
    /// insertion order. Single pass with a bounded heap.
    pub fn retrieve_topk(&self, q: &Query, k: usize, w: &RetrievalWeights) -> Vec<Hit> {
        if k == 0 {
            return Vec::new();
        }
        let inner = self.inner.read();
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        for (index, e) in inner.examples.iter().enumerate() {
            let Some(b) = &e.embeddings else { continue };
            let c = components(q, b);
            let r = Ranked { score: combine(c, w), c, index };
            if heap.len() < k {
                heap.push(r);
            } else if r < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(r);
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|r| Hit {
                example: inner.examples[r.index].clone(),
                s_instruction: r.c[0],
                s_textual: r.c[1],
                s_visual: r.c[2],
                score: r.score,
                index: r.index,
            })
            .collect()
    }

    /// Examples ranked `slice_index * slice_size ..` up to the next slice
    /// (0-based ranks, best first); short or empty near the end.
    pub fn retrieve_slice(&self, q: &Query, slice_index: usize, slice_size: usize, w: &RetrievalWeights) -> Vec<Hit> {
        let start = slice_index * slice_size;
        let mut hits = self.retrieve_topk(q, start + slice_size, w);
        hits.drain(..start.min(hits.len()));
        hits
    }

    /// An in-memory copy holding the first `n` examples.
    pub fn subset(&self, n: usize) -> MemoryStore {
        let out = MemoryStore::in_memory(self.embedder_id.clone(), self.dim);
        {
            let src = self.inner.read();
            let mut dst = out.inner.write();
            for e in src.examples.iter().take(n) {
                dst.push(e.clone());
            }
        }
        out
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())
}

/// Embeddings for an example: the instruction, the abstracted state (or the
/// initial observed state when there is no abstraction) and the final frame.
pub fn embed_example(e: &Example, embedder: &dyn Embedder) -> Result<EmbeddingBundle, MemoryError> {
    let state_text = if e.abstractions.abstracted_state.is_empty() {
        e.trajectory.initial_observation().map(|o| o.render_state()).unwrap_or_default()
    } else {
        e.abstractions.render_abstracted_state()
    };
    let state_text = if state_text.trim().is_empty() { e.instruction.text.clone() } else { state_text };
    let visual_vec = e
        .trajectory
        .final_observation()
        .and_then(|o| o.image_ref.as_ref())
        .and_then(|r| embedder.embed_image(r).ok());
    Ok(EmbeddingBundle {
        instruction_vec: embedder.embed_text(&e.instruction.text)?,
        textual_state_vec: embedder.embed_text(&state_text)?,
        visual_vec,
        provider_id: embedder.id().to_string(),
        dim: embedder.dim(),
    })
}

/// Heap entry ordered so that "greater" means "worse": lower score, then
/// later insertion.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f64,
    c: [f64; 3],
    index: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.index.cmp(&other.index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::HashEmbedder;
    use crate::model::{AbstractionSet, ExampleStatus, Instruction, Trajectory, TrajectoryKind, TrajectorySource};

    fn example(id: &str, text: &str) -> Example {
        Example {
            example_id: id.into(),
            instruction: Instruction::new(id, text, "household"),
            trajectory: Trajectory::empty(TrajectoryKind::Optimized, TrajectorySource::HumanDemo),
            abstractions: AbstractionSet::default(),
            embeddings: None,
            lineage: vec![],
            status: ExampleStatus::Accepted,
        }
    }

    #[test]
    fn topk_prefers_matching_instruction() {
        let emb = HashEmbedder::default();
        let m = MemoryStore::in_memory("hash", 64);
        m.add(example("a", "make coffee"), &emb).unwrap();
        m.add(example("b", "water the plant"), &emb).unwrap();
        m.add(example("c", "make a salad"), &emb).unwrap();
        let q = Query::embed(&emb, "water the house plant", None);
        let hits = m.retrieve_topk(&q, 2, &RetrievalWeights::default());
        assert_eq!(hits[0].example.example_id, "b");
        assert_eq!(hits.len(), 2);
        assert!(matches!(m.add(example("a", "x"), &emb), Err(MemoryError::DuplicateId(_))));
    }

    #[test]
    fn ties_keep_insertion_order() {
        let emb = HashEmbedder::default();
        let m = MemoryStore::in_memory("hash", 64);
        for id in ["x", "y", "z"] {
            m.add(example(id, "same words"), &emb).unwrap();
        }
        let q = Query::embed(&emb, "same words", None);
        let ids: Vec<String> =
            m.retrieve_topk(&q, 3, &RetrievalWeights::default()).iter().map(|h| h.example.example_id.clone()).collect();
        assert_eq!(ids, ["x", "y", "z"]);
        let slice = m.retrieve_slice(&q, 1, 2, &RetrievalWeights::default());
        assert_eq!(slice.len(), 1);
        assert_eq!(slice[0].example.example_id, "z");
    }

    #[test]
    fn persists_and_tolerates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let emb = HashEmbedder::default();
        {
            let (m, _) = MemoryStore::open(dir.path(), "hash", 64).unwrap();
            m.add(example("a", "make coffee"), &emb).unwrap();
            m.add(example("b", "make toast"), &emb).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(dir.path().join(EXAMPLES_FILE)).unwrap();
        f.write_all(b"{\"example_id\": \"c\", \"instr").unwrap();
        drop(f);
        let (m, report) = MemoryStore::open(dir.path(), "hash", 64).unwrap();
        assert_eq!(report, LoadReport { loaded: 2, torn_tail: true, compacted: true });
        assert_eq!(m.get("b").unwrap().instruction.text, "make toast");
        let (_, report) = MemoryStore::open(dir.path(), "hash", 64).unwrap();
        assert!(!report.torn_tail && !report.compacted);
        assert!(matches!(MemoryStore::open(dir.path(), "other", 64), Err(MemoryError::EmbedderMismatch { .. })));
    }
}
