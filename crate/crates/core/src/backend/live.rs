//! Client for an OpenAI-compatible chat-completions and embeddings API.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{completion, normalize, Backend, BackendError, Completion, Embedder, GenParams};
use crate::image::{ImageRef, ImageStore};
use crate::prompt::PromptBundle;

static REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests issued by [`ReqwestTransport`] in this process.
pub fn request_count() -> usize {
    REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpReply, BackendError>;
}

#[derive(Debug, Default)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpReply, BackendError> {
        REQUESTS.fetch_add(1, Ordering::SeqCst);
        let resp = self.client.post(url).bearer_auth(bearer).timeout(timeout).json(body).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub requests_per_second: f64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_attempts: 3,
            backoff_base_ms: 500,
            requests_per_second: 2.0,
        }
    }
}

struct Bucket {
    tokens: f64,
    last: Instant,
}

/// Shared HTTP plumbing: token-bucket rate limiting and retries with
/// exponential backoff.
struct Client {
    config: LiveConfig,
    key: String,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    bucket: Mutex<Bucket>,
}

impl Client {
    fn new(config: LiveConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        let bucket = Mutex::new(Bucket { tokens: config.requests_per_second.max(1.0), last: clock.now() });
        Ok(Self { config, key, transport, clock, bucket })
    }

    fn acquire(&self) {
        let rate = self.config.requests_per_second;
        if rate <= 0.0 {
            return;
        }
        let capacity = rate.max(1.0);
        let mut b = self.bucket.lock();
        let now = self.clock.now();
        b.tokens = (b.tokens + now.duration_since(b.last).as_secs_f64() * rate).min(capacity);
        b.last = now;
        if b.tokens < 1.0 {
            let wait = Duration::from_secs_f64((1.0 - b.tokens) / rate);
            self.clock.sleep(wait);
            b.tokens = 1.0;
            b.last = self.clock.now();
        }
        b.tokens -= 1.0;
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{path}", self.config.base_url.trim_end_matches('/'));
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let attempts = self.config.max_attempts.max(1);
        let mut last = BackendError::Transport("no attempt made".into());
        for k in 1..=attempts {
            self.acquire();
            let err = match self.transport.post_json(&url, &self.key, body, timeout) {
                Ok(r) if r.status == 200 => {
                    return serde_json::from_str(&r.body).map_err(|e| BackendError::BadResponse(e.to_string()))
                }
                Ok(r) if r.status == 401 || r.status == 403 => return Err(BackendError::Auth(r.body)),
                Ok(r) if r.status == 429 || r.status >= 500 => BackendError::Transport(format!("HTTP {}", r.status)),
                Ok(r) => return Err(BackendError::BadResponse(format!("HTTP {}: {}", r.status, r.body))),
                Err(e) if e.is_transient() => e,
                Err(e) => return Err(e),
            };
            tracing::warn!(attempt = k, "request to {url} failed: {err}");
            last = err;
            if k < attempts {
                self.clock.sleep(Duration::from_millis(self.config.backoff_base_ms << (k - 1)));
            }
        }
        Err(last)
    }
}

pub struct LiveBackend {
    client: Client,
    images: Option<ImageStore>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        Self::with_transport(config, Arc::new(ReqwestTransport::default()), Arc::new(SystemClock))
    }

    pub fn with_transport(
        config: LiveConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        Ok(Self { client: Client::new(config, transport, clock)?, images: None })
    }

    /// Attaches the store used to inline referenced images.
    pub fn with_images(mut self, store: ImageStore) -> Self {
        self.images = Some(store);
        self
    }

    fn request_body(&self, prompt: &PromptBundle, params: &GenParams) -> Value {
        let mut content = vec![json!({"type": "text", "text": prompt.user_text})];
        if let Some(store) = &self.images {
            for r in &prompt.image_refs {
                match store.get(r) {
                    Ok(bytes) => {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                        content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
                    }
                    Err(e) => tracing::warn!("image {} unavailable: {e}", r.digest()),
                }
            }
        }
        let mut body = json!({
            "model": self.client.config.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": content},
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        &self.client.config.model
    }

    fn complete(&self, prompt: &PromptBundle, params: &GenParams) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let v = self.client.post("chat/completions", &self.request_body(prompt, params))?;
        let choice = v.pointer("/choices/0").ok_or_else(|| BackendError::BadResponse("no choices".into()))?;
        if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
            return Err(BackendError::ContentFiltered);
        }
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::BadResponse("no message content".into()))?;
        Ok(completion(self.id(), prompt, text.to_string(), started))
    }
}

pub struct LiveEmbedder {
    client: Client,
    dim: usize,
}

impl LiveEmbedder {
    pub fn new(config: LiveConfig, dim: usize) -> Result<Self, BackendError> {
        Self::with_transport(config, dim, Arc::new(ReqwestTransport::default()), Arc::new(SystemClock))
    }

    pub fn with_transport(
        config: LiveConfig,
        dim: usize,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        Ok(Self { client: Client::new(config, transport, clock)?, dim })
    }
}

impl Embedder for LiveEmbedder {
    fn id(&self) -> &str {
        &self.client.config.embedding_model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let body = json!({"model": self.client.config.embedding_model, "input": text, "dimensions": self.dim});
        let v = self.client.post("embeddings", &body)?;
        let mut out: Vec<f64> = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::BadResponse("no embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::BadResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if out.len() != self.dim {
            return Err(BackendError::BadResponse(format!("expected {} dimensions, got {}", self.dim, out.len())));
        }
        if !normalize(&mut out) {
            return Err(BackendError::BadResponse("zero embedding".into()));
        }
        Ok(out)
    }

    /// The embeddings endpoint takes text only; images are reported as
    /// unsupported and retrieval scores the visual term as zero.
    fn embed_image(&self, _: &ImageRef) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::BadResponse("image embeddings are not supported by this endpoint".into()))
    }
}
