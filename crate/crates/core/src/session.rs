//! Per-run call context shared by the pipeline stages.

use std::fmt;

use serde_json::{json, Value};

use crate::error::Result;
use crate::gateway::{BudgetScope, Gateway, ModelRequest, ModelResponse, ModelRole};
use crate::prompts::{Registry, TemplateId};
use crate::trace::{EventKind, Trace};
use crate::types::{Concurrency, PipelineConfig};

/// A deterministic call-site path such as `r0/p2.i1/h0/neg/b0`.
///
/// Lanes name where a model call came from, independent of thread
/// scheduling, so scripted backends and trace checks can key on them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Lane {
    pub phase: u8,
    path: String,
}

impl Lane {
    pub fn new(phase: u8, path: impl Into<String>) -> Self {
        Lane {
            phase,
            path: path.into(),
        }
    }

    pub fn child(&self, segment: impl fmt::Display) -> Lane {
        Lane {
            phase: self.phase,
            path: format!("{}/{segment}", self.path),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.path
    }

    /// The lane with `/` replaced, usable as an identifier.
    pub fn id(&self) -> String {
        self.path.replace('/', "-")
    }
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path)
    }
}

/// Everything a pipeline stage needs to make calls and record them.
#[derive(Clone, Copy)]
pub struct Session<'a> {
    pub gateway: &'a Gateway,
    pub registry: &'a Registry,
    pub config: &'a PipelineConfig,
    pub trace: &'a Trace,
    /// Run index; `None` for calls made outside a run (the judge).
    pub run: Option<u32>,
}

impl fmt::Debug for Session<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session").field("run", &self.run).finish()
    }
}

impl<'a> Session<'a> {
    pub fn for_run(self, run: Option<u32>) -> Self {
        Session { run, ..self }
    }

    pub fn run_id(&self) -> String {
        match self.run {
            Some(r) => format!("r{r}"),
            None => "judge".to_string(),
        }
    }

    pub fn event(&self, lane: &Lane, kind: EventKind, payload: Value) {
        let gateway = self.gateway;
        self.trace
            .record(self.run, lane.phase, kind, lane.as_str(), || gateway.remaining(), payload);
    }

    /// Renders `template` and sends it as `role`.
    pub fn call(
        &self,
        role: ModelRole,
        template: TemplateId,
        slots: &[(&str, &str)],
        lane: &Lane,
        scope: Option<&BudgetScope>,
    ) -> Result<ModelResponse> {
        let prompt = self.registry.render(template, slots)?;
        self.send(role, template, prompt, lane, scope)
    }

    /// Sends an already rendered prompt and records a `model_call` event.
    pub fn send(
        &self,
        role: ModelRole,
        template: TemplateId,
        prompt: String,
        lane: &Lane,
        scope: Option<&BudgetScope>,
    ) -> Result<ModelResponse> {
        let settings = self.config.role(role);
        let request = ModelRequest {
            role,
            prompt,
            temperature: settings.temperature,
            max_output_tokens: settings.max_output_tokens,
            run_id: self.run_id(),
            lane: lane.to_string(),
        };
        match self.gateway.complete_scoped(&request, scope) {
            Ok(response) => {
                self.event(
                    lane,
                    EventKind::ModelCall,
                    json!({
                        "role": role,
                        "template": template.as_str(),
                        "prompt": request.prompt,
                        "response": response.text,
                        "usage": response.usage,
                        "usd": response.usd,
                        "backend": response.backend_id,
                        "latency_ms": response.latency_ms,
                    }),
                );
                Ok(response)
            }
            Err(err) => {
                self.event(
                    lane,
                    EventKind::ModelCall,
                    json!({
                        "role": role,
                        "template": template.as_str(),
                        "prompt": request.prompt,
                        "error": err.to_string(),
                    }),
                );
                Err(err.into())
            }
        }
    }
}

/// Runs `f(0..count)` sequentially or on scoped threads; results are
/// returned in index order either way.
pub fn fan_out<T, F>(concurrency: Concurrency, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match concurrency {
        Concurrency::Sequential => (0..count).map(f).collect(),
        Concurrency::Threads if count <= 1 => (0..count).map(f).collect(),
        Concurrency::Threads => std::thread::scope(|s| {
            let f = &f;
            let handles: Vec<_> = (0..count).map(|i| s.spawn(move || f(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        }),
    }
}
