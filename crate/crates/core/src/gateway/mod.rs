//! Text-generation gateway: retry, caching, budget and usage accounting in
//! front of a pluggable backend.

mod json_block;
mod ledger;
mod live;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use json_block::extract_json_block;
pub use ledger::{estimate_tokens, TagUsage, UnitPrices, UsageLedger, UsageRecord};
pub use live::{LiveBackend, LiveProfile};
pub use scripted::{Responder, ScriptedBackend};

/// Default output ceiling per request, in tokens.
pub const DEFAULT_MAX_OUTPUT: u32 = 4096;
/// Sampling temperature for generation roles.
pub const GENERATION_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    CriticStructural,
    CriticError,
    CriticCluster,
    Actor,
    ExampleMaterialize,
    Rephrase,
    Structuring,
    Evaluation,
    CompareJudge,
}

impl RequestTag {
    pub const ALL: [RequestTag; 9] = [
        RequestTag::CriticStructural,
        RequestTag::CriticError,
        RequestTag::CriticCluster,
        RequestTag::Actor,
        RequestTag::ExampleMaterialize,
        RequestTag::Rephrase,
        RequestTag::Structuring,
        RequestTag::Evaluation,
        RequestTag::CompareJudge,
    ];

    /// Directory / key name used by fixtures and configs.
    pub fn as_str(self) -> &'static str {
        match self {
            RequestTag::CriticStructural => "critic_structural",
            RequestTag::CriticError => "critic_error",
            RequestTag::CriticCluster => "critic_cluster",
            RequestTag::Actor => "actor",
            RequestTag::ExampleMaterialize => "example_materialize",
            RequestTag::Rephrase => "rephrase",
            RequestTag::Structuring => "structuring",
            RequestTag::Evaluation => "evaluation",
            RequestTag::CompareJudge => "compare_judge",
        }
    }

    pub fn parse(s: &str) -> Option<RequestTag> {
        RequestTag::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Evaluation is deterministic; every other role samples.
    pub fn default_temperature(self) -> f64 {
        match self {
            RequestTag::Evaluation => 0.0,
            _ => GENERATION_TEMPERATURE,
        }
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output: u32,
    pub tag: RequestTag,
}

impl GenerationRequest {
    pub fn new(tag: RequestTag, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: tag.default_temperature(),
            max_output: DEFAULT_MAX_OUTPUT,
            tag,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_output(mut self, n: u32) -> Self {
        self.max_output = n;
        self
    }

    /// Content digest of the request fields.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.tag.as_str(),
            &self.system_text,
            &self.user_text,
            &format!("{:.6}", self.temperature),
            &self.max_output.to_string(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn projected_tokens(&self) -> u64 {
        estimate_tokens(&self.system_text) + estimate_tokens(&self.user_text) + u64::from(self.max_output)
    }
}

/// Token counts reported by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<ReportedUsage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying (timeouts, rate limits, 5xx).
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("budget exceeded: {used} used + {projected} projected > cap {cap}")]
    BudgetExceeded { used: u64, projected: u64, cap: u64 },
    #[error("no parseable JSON block in reply")]
    NoParseableBlock,
    #[error("gateway state error: {0}")]
    State(String),
}

pub trait Backend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> String;

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError>;

    /// Serializable backend state (e.g. fixture cursors) for checkpoints.
    fn snapshot(&self) -> Value {
        Value::Null
    }

    fn restore(&self, _state: &Value) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

/// Everything needed to resume a gateway exactly where it stopped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewaySnapshot {
    pub backend: Value,
    pub cache: BTreeMap<String, String>,
    pub ledger: UsageLedger,
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable front door to a backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    token_cap: Option<u64>,
    cache: Mutex<BTreeMap<String, String>>,
    ledger: Mutex<UsageLedger>,
    permits: Permits,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("retry", &self.retry)
            .field("token_cap", &self.token_cap)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            token_cap: None,
            cache: Mutex::new(BTreeMap::new()),
            ledger: Mutex::new(UsageLedger::default()),
            permits: Permits {
                free: Mutex::new(8),
                cv: Condvar::new(),
            },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Caps total (input + output) tokens across all requests.
    pub fn with_token_cap(mut self, cap: Option<u64>) -> Self {
        self.token_cap = cap;
        self
    }

    pub fn with_prices(self, prices: Option<UnitPrices>) -> Self {
        self.ledger.lock().unwrap().prices = prices;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.permits = Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        };
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().unwrap().clone()
    }

    fn cache_key(&self, request: &GenerationRequest) -> String {
        let mut h = Sha256::new();
        h.update(self.backend.id().as_bytes());
        h.update([0]);
        h.update(request.digest().as_bytes());
        hex::encode(h.finalize())
    }

    /// Sends one request. Temperature-0 replies are served from cache after
    /// the first call.
    pub fn generate(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let cacheable = request.temperature == 0.0;
        let key = cacheable.then(|| self.cache_key(request));
        if let Some(k) = &key {
            if let Some(hit) = self.cache.lock().unwrap().get(k).cloned() {
                self.ledger.lock().unwrap().record_cache_hit(request.tag);
                return Ok(hit);
            }
        }
        if let Some(cap) = self.token_cap {
            let used = self.ledger.lock().unwrap().total().total_tokens();
            let projected = request.projected_tokens();
            if used + projected > cap {
                return Err(GatewayError::BudgetExceeded { used, projected, cap });
            }
        }
        let completion = {
            let _permit = self.permits.acquire();
            self.call_with_retry(request)?
        };
        self.ledger.lock().unwrap().record(request, &completion);
        if let Some(k) = key {
            self.cache.lock().unwrap().insert(k, completion.text.clone());
        }
        Ok(completion.text)
    }

    fn call_with_retry(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.backend.complete(request) {
                Ok(c) => return Ok(c),
                Err(BackendError::Fatal(msg)) => return Err(GatewayError::Backend(msg)),
                Err(BackendError::Transient(msg)) => {
                    log::warn!("{} request attempt {} failed: {msg}", request.tag, attempt + 1);
                    last = msg;
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, last })
    }

    /// Generates and extracts the reply's JSON value, re-asking once when the
    /// first reply holds none.
    pub fn generate_json(&self, request: &GenerationRequest) -> Result<Value, GatewayError> {
        let reply = self.generate(request)?;
        if let Ok(v) = extract_json_block(&reply) {
            return Ok(v);
        }
        log::warn!("{} reply held no JSON; re-asking once", request.tag);
        let mut again = request.clone();
        again.user_text.push_str("\n\nReturn only the JSON output in the required format.");
        extract_json_block(&self.generate(&again)?)
    }

    pub fn snapshot(&self) -> GatewaySnapshot {
        GatewaySnapshot {
            backend: self.backend.snapshot(),
            cache: self.cache.lock().unwrap().clone(),
            ledger: self.ledger(),
        }
    }

    pub fn restore(&self, snap: &GatewaySnapshot) -> Result<(), GatewayError> {
        self.backend.restore(&snap.backend).map_err(GatewayError::State)?;
        *self.cache.lock().unwrap() = snap.cache.clone();
        let mut ledger = self.ledger.lock().unwrap();
        let prices = ledger.prices;
        *ledger = snap.ledger.clone();
        ledger.prices = prices;
        Ok(())
    }
}
