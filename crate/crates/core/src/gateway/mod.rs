//! Uniform access to text-generation backends.
//!
//! [`Gateway`] sits in front of one or more [`Backend`]s and owns the three
//! pieces of shared mutable state a run needs: the remaining token budget,
//! the [`CostLedger`], and retry policy. Every model call in the pipeline
//! goes through [`Gateway::complete`].
//!
//! # Budget admission
//!
//! A call is admitted only if the budget left after subtracting in-flight
//! reservations is positive and covers the call's estimated input tokens.
//! Each admitted call reserves `input + max_output_tokens` until it
//! finishes. Consequently the total consumed by a run never exceeds
//! `token_budget` plus the output of a single call, provided backends
//! report input usage no larger than their estimate and respect
//! `max_output_tokens`. In strict mode the call must also fit its full
//! `max_output_tokens`, and the budget is never exceeded.

pub mod http;
pub mod ledger;
pub mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use ledger::{cost_of, CostLedger, PriceTable, Usd};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("token budget exhausted ({consumed} of {budget} tokens used)")]
    BudgetExceeded { budget: u64, consumed: u64 },

    #[error("backend {backend} failed after {attempts} attempt(s): {message}")]
    BackendFailure {
        backend: String,
        attempts: u32,
        message: String,
    },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("gateway config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Solver,
    Grader,
    Extractor,
    Parser,
    Processor,
    Judge,
}

impl ModelRole {
    pub const ALL: [ModelRole; 6] = [
        ModelRole::Solver,
        ModelRole::Grader,
        ModelRole::Extractor,
        ModelRole::Parser,
        ModelRole::Processor,
        ModelRole::Judge,
    ];

    /// Generation roles sample hotter than verification roles by default.
    pub fn is_generative(self) -> bool {
        matches!(self, ModelRole::Solver | ModelRole::Extractor)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Solver => "solver",
            ModelRole::Grader => "grader",
            ModelRole::Extractor => "extractor",
            ModelRole::Parser => "parser",
            ModelRole::Processor => "processor",
            ModelRole::Judge => "judge",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelRole {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| GatewayError::Config(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: ModelRole,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u64,
    pub run_id: String,
    /// Deterministic call-site path, e.g. `r0/p1.i1/b2/draft`.
    pub lane: String,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub thinking_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens + self.thinking_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
    pub latency_ms: u64,
    pub usd: Usd,
}

/// What a backend hands back for one successful call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying (rate limit, timeout, 5xx).
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// A text-generation backend.
pub trait Backend: Send + Sync {
    /// Identifier used in the ledger and price table.
    fn id(&self) -> &str;

    fn complete(&self, request: &ModelRequest) -> Result<BackendReply, BackendError>;

    /// Input tokens this request will be billed for. Used for admission.
    fn estimate_input_tokens(&self, request: &ModelRequest) -> u64 {
        estimate_tokens(&request.prompt)
    }

    /// Whether identical request sequences always produce identical replies.
    fn is_deterministic(&self) -> bool {
        false
    }

    /// Internal cursor state, for checkpoints. `None` for stateless backends.
    fn snapshot(&self) -> Option<serde_json::Value> {
        None
    }

    fn restore(&self, _state: &serde_json::Value) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Rough token count: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// A cap on tokens shared by a group of calls (for example both sides of
/// one hypothesis pair), checked in addition to the run budget.
#[derive(Debug)]
pub struct BudgetScope {
    limit: u64,
    used: Mutex<Accounting>,
}

impl BudgetScope {
    pub fn new(limit: u64) -> Self {
        BudgetScope {
            limit,
            used: Mutex::new(Accounting::default()),
        }
    }

    pub fn consumed(&self) -> u64 {
        lock(&self.used).consumed
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Accounting {
    consumed: u64,
    reserved: u64,
}

impl Accounting {
    fn available(&self, limit: u64) -> u64 {
        limit.saturating_sub(self.consumed + self.reserved)
    }
}

/// Serializable view of the gateway's mutable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySnapshot {
    pub budget: u64,
    pub consumed: u64,
    pub ledger: CostLedger,
    #[serde(default)]
    pub backends: BTreeMap<String, serde_json::Value>,
}

struct GatewayState {
    budget: u64,
    acct: Accounting,
    ledger: CostLedger,
}

pub struct Gateway {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    routes: BTreeMap<ModelRole, String>,
    default_backend: String,
    prices: PriceTable,
    retry: RetryPolicy,
    strict: bool,
    state: Mutex<GatewayState>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .field("routes", &self.routes)
            .field("strict", &self.strict)
            .finish()
    }
}

impl Gateway {
    /// A gateway with a single backend serving every role.
    pub fn new(backend: Arc<dyn Backend>, prices: PriceTable, budget: u64) -> Result<Self, GatewayError> {
        let name = backend.id().to_string();
        GatewayBuilder::new(prices, budget).backend(name.clone(), backend).default_backend(name).build()
    }

    pub fn builder(prices: PriceTable, budget: u64) -> GatewayBuilder {
        GatewayBuilder::new(prices, budget)
    }

    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        self.complete_scoped(request, None)
    }

    /// Runs one call with admission control, retry and ledger append.
    pub fn complete_scoped(
        &self,
        request: &ModelRequest,
        scope: Option<&BudgetScope>,
    ) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let backend = self.backend_for(request.role);
        let price = self
            .prices
            .get(backend.id())
            .ok_or_else(|| GatewayError::Config(format!("no price for backend {}", backend.id())))?
            .clone();

        let mut attempt = 0;
        loop {
            let reservation = self.admit(backend.as_ref(), request, scope)?;
            let started = Instant::now();
            let result = backend.complete(request);
            let latency_ms = started.elapsed().as_millis() as u64;
            match result {
                Ok(reply) => {
                    let usd = cost_of(&reply.usage, &price);
                    self.settle(reservation, scope, Some((request, backend.id(), reply.usage, usd)));
                    return Ok(ModelResponse {
                        text: reply.text,
                        usage: reply.usage,
                        backend_id: backend.id().to_string(),
                        latency_ms,
                        usd,
                    });
                }
                Err(err) => {
                    self.settle(reservation, scope, None);
                    attempt += 1;
                    let retryable = matches!(err, BackendError::Transient(_));
                    if !retryable || attempt >= self.retry.attempts.max(1) {
                        return Err(GatewayError::BackendFailure {
                            backend: backend.id().to_string(),
                            attempts: attempt,
                            message: err.to_string(),
                        });
                    }
                    let delay = self.retry.delay(attempt - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
        }
    }

    fn backend_for(&self, role: ModelRole) -> &Arc<dyn Backend> {
        let name = self.routes.get(&role).unwrap_or(&self.default_backend);
        &self.backends[name]
    }

    fn admit(
        &self,
        backend: &dyn Backend,
        request: &ModelRequest,
        scope: Option<&BudgetScope>,
    ) -> Result<u64, GatewayError> {
        let mut state = lock(&self.state);
        let input = backend.estimate_input_tokens(request);
        let hold = if self.strict {
            input + request.max_output_tokens
        } else {
            input
        };
        let reserve = input + request.max_output_tokens;
        let available = state.acct.available(state.budget);
        if available == 0 || available < hold {
            return Err(GatewayError::BudgetExceeded {
                budget: state.budget,
                consumed: state.acct.consumed,
            });
        }
        if let Some(scope) = scope {
            let mut used = lock(&scope.used);
            let available = used.available(scope.limit);
            if available == 0 || available < hold {
                return Err(GatewayError::BudgetExceeded {
                    budget: scope.limit,
                    consumed: used.consumed,
                });
            }
            used.reserved += reserve;
        }
        state.acct.reserved += reserve;
        Ok(reserve)
    }

    fn settle(
        &self,
        reservation: u64,
        scope: Option<&BudgetScope>,
        done: Option<(&ModelRequest, &str, Usage, Usd)>,
    ) {
        let mut state = lock(&self.state);
        state.acct.reserved -= reservation;
        let used = done.map(|d| d.2.total()).unwrap_or(0);
        state.acct.consumed += used;
        if let Some(scope) = scope {
            let mut acct = lock(&scope.used);
            acct.reserved -= reservation;
            acct.consumed += used;
        }
        if let Some((request, backend_id, usage, usd)) = done {
            state.ledger.append(&request.run_id, request.role, backend_id, usage, usd);
        }
    }

    pub fn budget(&self) -> u64 {
        lock(&self.state).budget
    }

    pub fn consumed(&self) -> u64 {
        lock(&self.state).acct.consumed
    }

    pub fn remaining(&self) -> u64 {
        let state = lock(&self.state);
        state.budget.saturating_sub(state.acct.consumed)
    }

    pub fn ledger(&self) -> CostLedger {
        lock(&self.state).ledger.clone()
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    /// True when every backend behind this gateway is deterministic.
    pub fn is_deterministic(&self) -> bool {
        self.backends.values().all(|b| b.is_deterministic())
    }

    pub fn snapshot(&self) -> GatewaySnapshot {
        let state = lock(&self.state);
        GatewaySnapshot {
            budget: state.budget,
            consumed: state.acct.consumed,
            ledger: state.ledger.clone(),
            backends: self
                .backends
                .iter()
                .filter_map(|(name, b)| b.snapshot().map(|s| (name.clone(), s)))
                .collect(),
        }
    }

    pub fn restore(&self, snapshot: &GatewaySnapshot) -> Result<(), GatewayError> {
        for (name, value) in &snapshot.backends {
            let backend = self
                .backends
                .get(name)
                .ok_or_else(|| GatewayError::Config(format!("snapshot names unknown backend {name}")))?;
            backend
                .restore(value)
                .map_err(|e| GatewayError::Config(format!("restoring backend {name}: {e}")))?;
        }
        let mut state = lock(&self.state);
        state.budget = snapshot.budget;
        state.acct = Accounting {
            consumed: snapshot.consumed,
            reserved: 0,
        };
        state.ledger = snapshot.ledger.clone();
        Ok(())
    }
}

pub struct GatewayBuilder {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    routes: BTreeMap<ModelRole, String>,
    default_backend: Option<String>,
    prices: PriceTable,
    budget: u64,
    retry: RetryPolicy,
    strict: bool,
}

impl GatewayBuilder {
    fn new(prices: PriceTable, budget: u64) -> Self {
        GatewayBuilder {
            backends: BTreeMap::new(),
            routes: BTreeMap::new(),
            default_backend: None,
            prices,
            budget,
            retry: RetryPolicy::default(),
            strict: false,
        }
    }

    pub fn backend(mut self, name: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        self.backends.insert(name.into(), backend);
        self
    }

    pub fn default_backend(mut self, name: impl Into<String>) -> Self {
        self.default_backend = Some(name.into());
        self
    }

    pub fn route(mut self, role: ModelRole, name: impl Into<String>) -> Self {
        self.routes.insert(role, name.into());
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        if self.budget == 0 {
            return Err(GatewayError::Config("token budget must be positive".into()));
        }
        self.prices.validate()?;
        let default_backend = match self.default_backend {
            Some(name) => name,
            None if self.backends.len() == 1 => self.backends.keys().next().cloned().unwrap_or_default(),
            None => return Err(GatewayError::Config("no default backend".into())),
        };
        for name in self.routes.values().chain(std::iter::once(&default_backend)) {
            let backend = self
                .backends
                .get(name)
                .ok_or_else(|| GatewayError::Config(format!("unknown backend {name}")))?;
            if self.prices.get(backend.id()).is_none() {
                return Err(GatewayError::Config(format!("no price for backend {}", backend.id())));
            }
        }
        let ledger = CostLedger::new(self.prices.clone());
        Ok(Gateway {
            backends: self.backends,
            routes: self.routes,
            default_backend,
            prices: self.prices,
            retry: self.retry,
            strict: self.strict,
            state: Mutex::new(GatewayState {
                budget: self.budget,
                acct: Accounting::default(),
                ledger,
            }),
        })
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}
