//! Shared handles used by every stage, and the prompt → model → parse call
//! with bounded regeneration.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, Embedder, GenParams};
use crate::memory::{Hit, MemoryStore, RetrievalQuery, RetrievalWeights};
use crate::model::{ActionApi, Example};
use crate::prompt::{parse_response, render, ParsedResponse, RenderContext, RenderError, TemplateId, Templates};
use crate::sim::household_api;

/// One model call as recorded in run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub template: TemplateId,
    pub prompt_digest: String,
    pub example_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no usable response after {attempts} calls: {reason}")]
    Unparseable { attempts: usize, reason: String },
}

#[derive(Clone)]
pub struct Engine {
    pub backend: Arc<dyn Backend>,
    pub embedder: Arc<dyn Embedder>,
    pub memory: Arc<MemoryStore>,
    pub templates: Arc<Templates>,
    pub api: ActionApi,
    pub params: GenParams,
    pub weights: RetrievalWeights,
    /// Total calls per request, counting regenerations after unusable replies.
    pub max_calls: usize,
}

impl Engine {
    pub fn new(backend: Arc<dyn Backend>, embedder: Arc<dyn Embedder>, memory: Arc<MemoryStore>) -> Self {
        Self {
            backend,
            embedder,
            memory,
            templates: Arc::new(Templates::builtin()),
            api: household_api(),
            params: GenParams::default(),
            weights: RetrievalWeights::default(),
            max_calls: 3,
        }
    }

    /// The same engine over a different memory.
    pub fn with_memory(&self, memory: Arc<MemoryStore>) -> Self {
        Self { memory, ..self.clone() }
    }

    pub fn context(&self) -> RenderContext {
        RenderContext::new(self.api.clone())
    }

    pub fn retrieve(&self, query: &RetrievalQuery, k: usize) -> Vec<Hit> {
        if k == 0 || self.memory.is_empty() {
            return Vec::new();
        }
        self.memory.retrieve_topk(&query.embed(self.embedder.as_ref()), k, &self.weights)
    }

    pub fn retrieve_examples(&self, query: &RetrievalQuery, k: usize) -> Vec<Arc<Example>> {
        self.retrieve(query, k).into_iter().map(|h| h.example).collect()
    }

    /// Renders `ctx` with template `id`, calls the model and hands the parsed
    /// reply to `accept`. A reply that fails to parse or is rejected by
    /// `accept` is regenerated with a note naming the problem, up to
    /// `max_calls` calls in total. Backend errors end the call immediately.
    pub fn call<T>(
        &self,
        id: TemplateId,
        ctx: &RenderContext,
        log: &mut Vec<CallRecord>,
        mut accept: impl FnMut(&ParsedResponse) -> Result<T, String>,
    ) -> Result<T, CallError> {
        let attempts = self.max_calls.max(1);
        let mut reason = String::new();
        for attempt in 1..=attempts {
            let mut ctx = ctx.clone();
            if attempt > 1 {
                let note = format!(
                    "Note: the previous answer could not be used ({reason}). Answer again and include every required section."
                );
                ctx.note = Some(match ctx.note.take() {
                    Some(n) => format!("{n}\n{note}"),
                    None => note,
                });
            }
            let bundle = render(&self.templates, id, &ctx)?;
            let mut record = CallRecord {
                template: id,
                prompt_digest: bundle.digest(),
                example_ids: bundle.example_ids.clone(),
                response: None,
                problem: None,
            };
            let reply = match self.backend.complete(&bundle, &self.params) {
                Ok(c) => c,
                Err(e) => {
                    record.problem = Some(e.to_string());
                    log.push(record);
                    return Err(e.into());
                }
            };
            record.response = Some(reply.text.clone());
            let result = parse_response(id, &reply.text).map_err(|e| e.to_string()).and_then(|p| accept(&p));
            match result {
                Ok(v) => {
                    log.push(record);
                    return Ok(v);
                }
                Err(r) => {
                    record.problem = Some(r.clone());
                    log.push(record);
                    reason = r;
                }
            }
        }
        Err(CallError::Unparseable { attempts, reason })
    }
}
