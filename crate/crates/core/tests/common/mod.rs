#![allow(dead_code)]

pub mod parse;
pub mod sessions;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use ical::backend::{Backend, BackendError, Completion, Embedder, GenParams, HashEmbedder, RuleMock};
use ical::engine::Engine;
use ical::memory::{components, combine, MemoryStore, Query, RetrievalWeights};
use ical::model::{EmbeddingBundle, Example, ExampleStatus, Instruction};
use ical::pipeline::instruction_for;
use ical::prompt::{PromptBundle, TemplateId};
use ical::sim::{generate_noisy_demo, Catalog, NoiseProfile};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn catalog() -> Arc<Catalog> {
    Arc::new(Catalog::builtin())
}

pub fn rules_engine(catalog: &Arc<Catalog>) -> Engine {
    let embedder = Arc::new(HashEmbedder::default());
    let memory = Arc::new(MemoryStore::in_memory(embedder.id(), embedder.dim()));
    Engine::new(Arc::new(RuleMock::new(catalog.clone())), embedder, memory)
}

pub fn empty_memory(engine: &Engine) -> Arc<MemoryStore> {
    Arc::new(MemoryStore::in_memory(engine.embedder.id(), engine.embedder.dim()))
}

// ---------------------------------------------------------------- retrieval

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A store of `n` examples with random unit embeddings (a third of them
/// without a visual vector).
pub fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> MemoryStore {
    let cat = Catalog::builtin();
    let task = cat.tasks().next().unwrap().clone();
    let demo = generate_noisy_demo(&task, 1, NoiseProfile::none());
    let store = MemoryStore::in_memory("random", dim);
    for i in 0..n {
        let visual_vec = (i % 3 != 0).then(|| unit(rng, dim));
        let e = Example {
            example_id: format!("ex{i}"),
            instruction: Instruction::new(format!("i{i}"), task.instruction_text.clone(), "household"),
            trajectory: demo.clone(),
            abstractions: Default::default(),
            embeddings: Some(EmbeddingBundle {
                instruction_vec: unit(rng, dim),
                textual_state_vec: unit(rng, dim),
                visual_vec,
                provider_id: "random".into(),
                dim,
            }),
            lineage: Vec::new(),
            status: ExampleStatus::RawDemo,
        };
        store.add_precomputed(e).unwrap();
    }
    store
}

pub fn random_query(rng: &mut ChaCha8Rng, dim: usize) -> Query {
    Query {
        instruction_vec: Some(unit(rng, dim)),
        textual_state_vec: rng.random_bool(0.8).then(|| unit(rng, dim)),
        visual_vec: rng.random_bool(0.7).then(|| unit(rng, dim)),
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> RetrievalWeights {
    RetrievalWeights { instruction: rng.random_range(0.0..1.0), textual: rng.random_range(0.0..1.0), visual: rng.random_range(0.0..1.0) }
}

/// Straightforward scoring and full sort: (index, score) best first, ties by
/// insertion order. Scores are recomputed from the raw vectors with an
/// explicit dot product (the stored vectors are unit length).
pub fn brute_force_topk(store: &MemoryStore, q: &Query, k: usize, w: &RetrievalWeights) -> Vec<(usize, f64)> {
    let dot = |a: &Option<Vec<f64>>, b: Option<&Vec<f64>>| -> f64 {
        match (a, b) {
            (Some(a), Some(b)) => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / na
            }
            _ => 0.0,
        }
    };
    let mut all: Vec<(usize, f64)> = store
        .examples()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let b = e.embeddings.as_ref().unwrap();
            let s = w.instruction * dot(&q.instruction_vec, Some(&b.instruction_vec))
                + w.textual * dot(&q.textual_state_vec, Some(&b.textual_state_vec))
                + w.visual * dot(&q.visual_vec, b.visual_vec.as_ref());
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn component_scores(store: &MemoryStore, q: &Query) -> Vec<[f64; 3]> {
    store.examples().iter().map(|e| components(q, e.embeddings.as_ref().unwrap())).collect()
}

pub fn combined(c: [f64; 3], w: &RetrievalWeights) -> f64 {
    combine(c, w)
}

// ------------------------------------------------------------ edit distance

/// Unrestricted Damerau-Levenshtein from `source` to every string over
/// `alphabet` of length at most `max_len`, by depth-first search over the
/// trie of targets. Columns are indexed by target prefix and kept on the
/// DFS stack, so each target costs one column.
pub fn dl_all_targets(source: &[u8], alphabet: &[u8], max_len: usize, mut visit: impl FnMut(&[u8], usize)) {
    let n = source.len();
    let mut cols: Vec<Vec<usize>> = vec![(0..=n).collect()];
    let mut target: Vec<u8> = Vec::new();
    fn rec(
        source: &[u8],
        alphabet: &[u8],
        max_len: usize,
        cols: &mut Vec<Vec<usize>>,
        target: &mut Vec<u8>,
        visit: &mut dyn FnMut(&[u8], usize),
    ) {
        let n = source.len();
        visit(target, cols[target.len()][n]);
        if target.len() == max_len {
            return;
        }
        for &c in alphabet {
            target.push(c);
            let j = target.len();
            let mut col = vec![0usize; n + 1];
            col[0] = j;
            for i in 1..=n {
                let cost = usize::from(source[i - 1] != c);
                let mut v = (cols[j - 1][i - 1] + cost).min(col[i - 1] + 1).min(cols[j - 1][i] + 1);
                let i1 = (1..i).rev().find(|&r| source[r - 1] == c);
                let j1 = (1..j).rev().find(|&s| target[s - 1] == source[i - 1]);
                if let (Some(i1), Some(j1)) = (i1, j1) {
                    v = v.min(cols[j1 - 1][i1 - 1] + (i - i1 - 1) + 1 + (j - j1 - 1));
                }
                col[i] = v;
            }
            cols.push(col);
            rec(source, alphabet, max_len, cols, target, visit);
            cols.pop();
            target.pop();
        }
    }
    rec(source, alphabet, max_len, &mut cols, &mut target, &mut visit);
}

pub fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Shortest number of single edits (insert, delete, substitute, swap two
/// adjacent symbols) from `source` to every string reachable while never
/// exceeding `cap` symbols.
pub fn bfs_distances(source: &[u8], alphabet: &[u8], cap: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(source.to_vec(), 0);
    queue.push_back(source.to_vec());
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next: HashSet<Vec<u8>> = HashSet::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            next.insert(t);
            for &c in alphabet {
                let mut t = s.clone();
                t[i] = c;
                next.insert(t);
            }
            if i + 1 < s.len() {
                let mut t = s.clone();
                t.swap(i, i + 1);
                next.insert(t);
            }
        }
        if s.len() < cap {
            for i in 0..=s.len() {
                for &c in alphabet {
                    let mut t = s.clone();
                    t.insert(i, c);
                    next.insert(t);
                }
            }
        }
        for t in next {
            if !dist.contains_key(&t) {
                dist.insert(t.clone(), d + 1);
                queue.push_back(t);
            }
        }
    }
    dist
}

// ------------------------------------------------------------------ backends

/// Wraps a backend and replaces some replies of one template with text that
/// has no usable sections. Which calls are spoiled is decided by a seeded
/// hash of the prompt, so runs are reproducible.
pub struct Flaky<B> {
    pub inner: B,
    pub template: TemplateId,
    pub rate: f64,
    pub seed: u64,
}

impl<B: Backend> Backend for Flaky<B> {
    fn id(&self) -> &str {
        "flaky"
    }

    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        let mut c = self.inner.complete(prompt, params)?;
        if prompt.template_id == self.template {
            let h = u64::from_str_radix(&prompt.digest()[..15], 16).unwrap() ^ self.seed;
            let u = (h.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.rate {
                c.text = "I am not sure what to do here.".into();
            }
        }
        Ok(c)
    }
}

/// Fails every call of one template with the given error.
pub struct FailOn<B> {
    pub inner: B,
    pub template: TemplateId,
    pub error: BackendError,
}

impl<B: Backend> Backend for FailOn<B> {
    fn id(&self) -> &str {
        "fail-on"
    }

    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        if prompt.template_id == self.template {
            return Err(self.error.clone());
        }
        self.inner.complete(prompt, params)
    }
}

pub fn instruction(catalog: &Catalog, task_id: &str) -> Instruction {
    instruction_for(catalog.get(task_id).unwrap())
}
