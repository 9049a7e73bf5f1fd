//! Run configuration: one TOML file naming paths, the model backend and the
//! settings of every stage. `${VAR}` in the file is replaced by the
//! environment variable before parsing; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::abstraction::AbstractionConfig;
use crate::backend::{
    Backend, BackendSpec, EchoBackend, Embedder, HashEmbedder, LiveBackend, LiveConfig, LiveEmbedder, RecordingBackend,
    RuleBook, RuleMock, ScriptedBackend,
};
use crate::deploy::DeployConfig;
use crate::engine::Engine;
use crate::hitl::HitlConfig;
use crate::memory::{LoadReport, MemoryStore, RetrievalWeights};
use crate::pipeline::LearnConfig;
use crate::prompt::Templates;
use crate::sim::{Catalog, NoiseProfile, Split};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("invalid config at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of task-family TOML files; the built-in catalog when unset.
    pub catalog: Option<PathBuf>,
    /// Persistent example memory; in-memory only when unset.
    pub memory_dir: Option<PathBuf>,
    /// Directory of template overrides.
    pub templates: Option<PathBuf>,
    /// JSONL file that every model call is appended to.
    pub transcripts: Option<PathBuf>,
    /// Demonstration records for `learn`; generated when unset.
    pub demos: Option<PathBuf>,
    /// Where reports are written.
    pub reports: Option<PathBuf>,
    /// Rule book for the rule-driven mock; the built-in one when unset.
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub spec: BackendSpec,
    pub embedder: EmbedderKind,
    pub embedding_dim: usize,
    pub live: LiveConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { spec: BackendSpec::Mock("rules".into()), embedder: EmbedderKind::Hash, embedding_dim: 64, live: LiveConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub count: usize,
    pub split: Split,
    pub noise: NoiseProfile,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { count: 60, split: Split::Seen, noise: NoiseProfile::typical() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Tasks evaluated, interleaved across families.
    pub tasks: usize,
    pub sweep_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Unseen, tasks: 50, sweep_sizes: vec![0, 10, 25, 50] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Events kept in total for replay to reconnecting clients.
    pub event_buffer: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), event_buffer: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub backend: BackendConfig,
    pub retrieval: RetrievalWeights,
    pub demos: DemoConfig,
    pub abstraction: AbstractionConfig,
    pub hitl: HitlConfig,
    pub deploy: DeployConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            backend: BackendConfig::default(),
            retrieval: RetrievalWeights::default(),
            demos: DemoConfig::default(),
            abstraction: AbstractionConfig::default(),
            hitl: HitlConfig::default(),
            deploy: DeployConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

static VAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

/// Replaces `${NAME}` with `lookup(NAME)`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for c in VAR.captures_iter(text) {
        let m = c.get(0).unwrap();
        out.push_str(&text[last..m.start()]);
        out.push_str(&lookup(&c[1]).ok_or_else(|| ConfigError::MissingEnv(c[1].to_string()))?);
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let de = toml::Deserializer::parse(&text).map_err(|e| ConfigError::Parse { path: String::new(), message: e.to_string() })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| ConfigError::Parse { path: e.path().to_string(), message: e.inner().to_string() })?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.deploy.check().map_err(ConfigError::Invalid)?;
        if self.backend.embedding_dim == 0 {
            return Err(ConfigError::Invalid("backend.embedding_dim must be positive".into()));
        }
        let w = &self.retrieval;
        if [w.instruction, w.textual, w.visual].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ConfigError::Invalid("retrieval weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Inputs that must already exist do.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        for (name, path) in [("catalog", &p.catalog), ("templates", &p.templates), ("demos", &p.demos), ("rules", &p.rules)] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(ConfigError::Invalid(format!("paths.{name}: {} does not exist", path.display())));
                }
            }
        }
        if let BackendSpec::Mock(name) = &self.backend.spec {
            if !matches!(name.as_str(), "rules" | "echo") && !Path::new(name).exists() {
                return Err(ConfigError::Invalid(format!("mock fixture {name} does not exist")));
            }
        }
        Ok(())
    }

    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig { abstraction: self.abstraction, hitl: self.hitl }
    }

    pub fn catalog(&self) -> Result<Catalog, ConfigError> {
        match &self.paths.catalog {
            Some(dir) => Catalog::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Catalog::builtin()),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.backend.embedder {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(self.backend.embedding_dim, self.seed)),
            EmbedderKind::Live => Arc::new(
                LiveEmbedder::new(self.backend.live.clone(), self.backend.embedding_dim)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn backend(&self, catalog: &Arc<Catalog>) -> Result<Arc<dyn Backend>, ConfigError> {
        let inner: Arc<dyn Backend> = match &self.backend.spec {
            BackendSpec::Live => {
                Arc::new(LiveBackend::new(self.backend.live.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?)
            }
            BackendSpec::Mock(name) => match name.as_str() {
                "echo" => Arc::new(EchoBackend),
                "rules" => {
                    let rules = match &self.paths.rules {
                        Some(p) => {
                            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                            RuleBook::from_toml(&text).map_err(ConfigError::Invalid)?
                        }
                        None => RuleBook::builtin(),
                    };
                    Arc::new(RuleMock::with_rules(catalog.clone(), rules))
                }
                path => Arc::new(
                    ScriptedBackend::from_transcript(Path::new(path))
                        .map_err(|source| ConfigError::Io { path: path.into(), source })?,
                ),
            },
        };
        Ok(match &self.paths.transcripts {
            Some(p) => Arc::new(
                RecordingBackend::new(inner, p.clone()).map_err(|source| ConfigError::Io { path: p.clone(), source })?,
            ),
            None => inner,
        })
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        match &self.paths.templates {
            Some(dir) => Templates::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Templates::builtin()),
        }
    }

    /// Opens (or creates) the configured memory.
    pub fn memory(&self, embedder: &dyn Embedder) -> Result<(MemoryStore, Option<LoadReport>), ConfigError> {
        match &self.paths.memory_dir {
            Some(dir) => {
                let (m, report) =
                    MemoryStore::open(dir, embedder.id(), embedder.dim()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok((m, Some(report)))
            }
            None => Ok((MemoryStore::in_memory(embedder.id(), embedder.dim()), None)),
        }
    }

    /// Everything a run needs: catalog and an engine over the configured
    /// memory and backend.
    pub fn build(&self) -> Result<(Arc<Catalog>, Engine), ConfigError> {
        let catalog = Arc::new(self.catalog()?);
        let embedder = self.embedder()?;
        let (memory, report) = self.memory(embedder.as_ref())?;
        if let Some(r) = report {
            tracing::info!("memory: {} examples loaded", r.loaded);
        }
        let mut engine = Engine::new(self.backend(&catalog)?, embedder, Arc::new(memory));
        engine.templates = Arc::new(self.templates()?);
        engine.weights = self.retrieval;
        Ok((catalog, engine))
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.catalog,
            &mut self.memory_dir,
            &mut self.templates,
            &mut self.transcripts,
            &mut self.demos,
            &mut self.reports,
            &mut self.rules,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
