//! Model backends: the completion and embedding interfaces, offline
//! backends for tests and experiments, and an HTTP client for a hosted model.

mod live;
mod rules;

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::image::ImageRef;
use crate::prompt::{PromptBundle, TemplateId};

pub use live::{
    request_count, Clock, HttpReply, LiveBackend, LiveConfig, LiveEmbedder, ReqwestTransport, SystemClock, Transport,
};
pub use rules::{Rule, RuleBook, RuleMock};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("response withheld by content filter")]
    ContentFiltered,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("no scripted reply for {template} prompt {digest}")]
    Unscripted { template: TemplateId, digest: String },
    #[error("empty input")]
    EmptyInput,
}

impl BackendError {
    /// Whether retrying the same request might succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 2048, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub prompt_digest: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        (**self).complete(prompt, params)
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed_text(text)
    }
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        (**self).embed_image(image)
    }
}

fn completion(backend_id: &str, prompt: &PromptBundle, text: String, started: Instant) -> Completion {
    Completion {
        text,
        backend_id: backend_id.to_string(),
        prompt_digest: prompt.digest(),
        latency_ms: started.elapsed().as_millis() as u64,
    }
}

/// Replies with the user text of the prompt.
#[derive(Debug, Default)]
pub struct EchoBackend;

impl Backend for EchoBackend {
    fn id(&self) -> &str {
        "echo"
    }
    fn complete(&self, prompt: &PromptBundle, _: &GenParams) -> Result<Completion, BackendError> {
        Ok(completion("echo", prompt, prompt.user_text.clone(), Instant::now()))
    }
}

/// One reply of a [`ScriptedBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Text(String),
    Error { error: BackendError },
}

/// Replays canned replies: first by exact prompt digest, then from a
/// per-template queue. Anything else is an `Unscripted` error.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_digest: Mutex<BTreeMap<String, VecDeque<Reply>>>,
    by_template: Mutex<BTreeMap<TemplateId, VecDeque<Reply>>>,
    log: Mutex<Vec<(TemplateId, String)>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_digest(self, digest: impl Into<String>, reply: impl Into<String>) -> Self {
        self.by_digest.lock().entry(digest.into()).or_default().push_back(Reply::Text(reply.into()));
        self
    }

    pub fn push(&self, template: TemplateId, reply: Reply) {
        self.by_template.lock().entry(template).or_default().push_back(reply);
    }

    pub fn then(self, template: TemplateId, reply: impl Into<String>) -> Self {
        self.push(template, Reply::Text(reply.into()));
        self
    }

    pub fn then_error(self, template: TemplateId, error: BackendError) -> Self {
        self.push(template, Reply::Error { error });
        self
    }

    /// Digests and templates of every prompt received, in order.
    pub fn calls(&self) -> Vec<(TemplateId, String)> {
        self.log.lock().clone()
    }

    pub fn remaining(&self, template: TemplateId) -> usize {
        self.by_template.lock().get(&template).map_or(0, VecDeque::len)
    }

    /// Loads digest-keyed replies from a transcript written by
    /// [`RecordingBackend`].
    pub fn from_transcript(path: &Path) -> std::io::Result<Self> {
        let out = Self::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let Ok(entry) = serde_json::from_str::<TranscriptEntry>(&line) else { continue };
            let reply = match entry.error {
                Some(error) => Reply::Error { error },
                None => Reply::Text(entry.response.unwrap_or_default()),
            };
            out.by_digest.lock().entry(entry.prompt_digest).or_default().push_back(reply);
        }
        Ok(out)
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &PromptBundle, _: &GenParams) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let digest = prompt.digest();
        self.log.lock().push((prompt.template_id, digest.clone()));
        let reply = {
            let mut d = self.by_digest.lock();
            match d.get_mut(&digest) {
                // The last reply for a digest keeps answering.
                Some(q) if q.len() > 1 => q.pop_front(),
                Some(q) => q.front().cloned(),
                None => None,
            }
        }
        .or_else(|| self.by_template.lock().get_mut(&prompt.template_id).and_then(VecDeque::pop_front));
        match reply {
            Some(Reply::Text(t)) => Ok(completion("scripted", prompt, t, started)),
            Some(Reply::Error { error }) => Err(error),
            None => Err(BackendError::Unscripted { template: prompt.template_id, digest }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template: TemplateId,
    pub prompt_digest: String,
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
    pub backend_id: String,
}

/// Wraps a backend and appends every exchange to a JSONL transcript.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    file: Mutex<File>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { inner, path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        let result = self.inner.complete(prompt, params);
        let entry = TranscriptEntry {
            template: prompt.template_id,
            prompt_digest: prompt.digest(),
            system: prompt.system_text.clone(),
            user: prompt.user_text.clone(),
            response: result.as_ref().ok().map(|c| c.text.clone()),
            error: result.as_ref().err().cloned(),
            backend_id: self.inner.id().to_string(),
        };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        if let Err(e) = self.file.lock().write_all(line.as_bytes()) {
            tracing::warn!("cannot append to transcript {}: {e}", self.path.display());
        }
        result
    }
}

/// Offline embedder: hashed bag of lowercase word tokens, L2-normalised.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dim];
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = fnv1a(self.seed, tok.to_lowercase().as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        if normalize(&mut v) {
            Ok(v)
        } else {
            Err(BackendError::EmptyInput)
        }
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let mut v: Vec<f64> = (0..self.dim)
            .map(|i| {
                let h = fnv1a(self.seed ^ i as u64, image.digest().as_bytes());
                (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        if normalize(&mut v) {
            Ok(v)
        } else {
            Err(BackendError::EmptyInput)
        }
    }
}

/// Which backend to build, as written on the command line: `live`, or
/// `mock:<fixture>` where the fixture is `rules` (the rule-driven simulator
/// model) or a path to a recorded transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Live,
    Mock(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(BackendSpec::Live),
            _ => match s.strip_prefix("mock:") {
                Some(f) if !f.is_empty() => Ok(BackendSpec::Mock(f.to_string())),
                _ => Err(format!("backend must be `live` or `mock:<fixture>`, got `{s}`")),
            },
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Live => f.write_str("live"),
            BackendSpec::Mock(x) => write!(f, "mock:{x}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(t: TemplateId, user: &str) -> PromptBundle {
        PromptBundle {
            template_id: t,
            system_text: "s".into(),
            user_text: user.into(),
            image_refs: vec![],
            example_ids: vec![],
            elided_plan_steps: 0,
            over_budget: false,
        }
    }

    #[test]
    fn scripted_digest_then_queue() {
        let p = bundle(TemplateId::Deployment, "a");
        let b = ScriptedBackend::new()
            .on_digest(p.digest(), "by digest")
            .then(TemplateId::Deployment, "queued")
            .then_error(TemplateId::Deployment, BackendError::Timeout);
        let g = GenParams::default();
        assert_eq!(b.complete(&p, &g).unwrap().text, "by digest");
        let q = bundle(TemplateId::Deployment, "b");
        assert_eq!(b.complete(&q, &g).unwrap().text, "queued");
        assert_eq!(b.complete(&q, &g).unwrap_err(), BackendError::Timeout);
        assert!(matches!(b.complete(&q, &g), Err(BackendError::Unscripted { .. })));
        assert_eq!(b.calls().len(), 4);
    }

    #[test]
    fn hash_embedding_is_unit_and_deterministic() {
        let e = HashEmbedder::default();
        let a = e.embed_text("Make a cup of coffee").unwrap();
        assert_eq!(a, e.embed_text("make a cup of COFFEE").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed_text("  ,, "), Err(BackendError::EmptyInput));
    }

    #[test]
    fn backend_spec_parses() {
        assert_eq!("live".parse::<BackendSpec>().unwrap(), BackendSpec::Live);
        assert_eq!("mock:rules".parse::<BackendSpec>().unwrap(), BackendSpec::Mock("rules".into()));
        assert!("mock:".parse::<BackendSpec>().is_err());
        assert!("gpt".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn transcript_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let inner = ScriptedBackend::new().then(TemplateId::Relabel, "hello");
        let rec = RecordingBackend::new(inner, &path).unwrap();
        let p = bundle(TemplateId::Relabel, "x");
        rec.complete(&p, &GenParams::default()).unwrap();
        let replay = ScriptedBackend::from_transcript(&path).unwrap();
        assert_eq!(replay.complete(&p, &GenParams::default()).unwrap().text, "hello");
    }
}
