//! Prompt rendering, the chat-completion client and output parsing.
//!
//! Every model call goes through [`LlmClient::complete`], which applies the
//! response cache, the in-flight limiter and the retry policy, and appends a
//! [`CallRecord`] to the caller's [`CallLog`]. Pipeline cost and latency
//! totals are sums over that log.

mod backend;
mod cache;
mod limiter;
mod mock;
pub mod parse;
pub mod templates;

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backend::{ChatBackend, HttpBackend, HttpBackendConfig, Pricing};
pub use cache::{CacheKey, ResponseCache};
pub use limiter::Limiter;
pub use mock::{FixtureBackend, MockRule, ScriptedBackend};
pub use parse::{
    detect_sentinel, extract_delimited, extract_json_payload, Delimited, JsonPayloadError,
    Sentinel,
};
pub use templates::{placeholder_sites, render, render_prompt, TemplateError, TemplateId};

/// Appended to a prompt when a JSON payload could not be parsed.
pub const JSON_REASK: &str = "Please return only the JSON object.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o".to_string(),
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
    pub latency_ms: u64,
    /// Failed attempts before the successful one.
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Usage,
}

pub struct CompletionRequest<'a> {
    pub template: TemplateId,
    pub messages: &'a [ChatMessage],
    pub params: &'a CompletionParams,
}

impl CompletionRequest<'_> {
    pub fn prompt_hash(&self) -> String {
        prompt_hash(self.messages)
    }

    /// All message contents joined, for substring-based mock matching.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Content hash of a message list; keys mock fixtures and the response cache.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        hasher.update(role.as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no mock response for prompt {hash} (template {template}):\n{prompt}")]
    MockMiss {
        template: TemplateId,
        hash: String,
        prompt: String,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("response cache: {0}")]
    Cache(String),
    #[error("{template}: could not parse structured output")]
    Parse { template: TemplateId, raw: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// One completed call as recorded for accounting and traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub scope: String,
    pub seq: u32,
    pub template: TemplateId,
    pub prompt_hash: String,
    pub model_id: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
    pub wall_ms: u64,
}

impl UsageTotals {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CallRecord>) -> Self {
        let mut t = UsageTotals::default();
        for r in records {
            t.calls += 1;
            t.prompt_tokens += r.usage.prompt_tokens;
            t.completion_tokens += r.usage.completion_tokens;
            t.cost_usd += r.usage.cost_usd;
            t.wall_ms += r.usage.latency_ms;
        }
        t
    }

    pub fn merge(&mut self, other: &UsageTotals) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.cost_usd += other.cost_usd;
        self.wall_ms += other.wall_ms;
    }
}

/// Append-only log of calls for one run; safe for concurrent appends.
#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn push(&self, record: CallRecord) {
        self.records.lock().expect("call log lock").push(record);
    }

    /// Records ordered by `(scope, seq)`, independent of completion order.
    pub fn sorted(&self) -> Vec<CallRecord> {
        let mut out = self.records.lock().expect("call log lock").clone();
        out.sort_by(|a, b| a.scope.cmp(&b.scope).then(a.seq.cmp(&b.seq)));
        out
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("call log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sums in sorted order so float totals do not depend on timing.
    pub fn totals(&self) -> UsageTotals {
        UsageTotals::from_records(&self.sorted())
    }

    pub fn totals_for_prefix(&self, prefix: &str) -> UsageTotals {
        UsageTotals::from_records(self.sorted().iter().filter(|r| r.scope.starts_with(prefix)))
    }
}

/// Names the pipeline step issuing a run of calls. Calls within one scope
/// are sequential, so `(label, seq)` orders the log deterministically no
/// matter how scopes interleave.
#[derive(Debug)]
pub struct CallScope {
    log: Arc<CallLog>,
    label: String,
    seq: AtomicU32,
}

impl CallScope {
    pub fn new(log: Arc<CallLog>, label: impl Into<String>) -> Self {
        Self {
            log,
            label: label.into(),
            seq: AtomicU32::new(0),
        }
    }

    pub fn child(&self, label: impl Into<String>) -> Self {
        Self::new(self.log.clone(), label)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }
}

pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    retry: RetryPolicy,
    params: CompletionParams,
    live_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.name())
            .field("params", &self.params)
            .finish()
    }
}

pub const DEFAULT_CONCURRENCY: usize = 4;

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: None,
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            retry: RetryPolicy::default(),
            params: CompletionParams::default(),
            live_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.limiter = Limiter::new(limit);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_params(mut self, params: CompletionParams) -> Self {
        self.params = params;
        self
    }

    pub fn params(&self) -> &CompletionParams {
        &self.params
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    /// Calls that reached the backend (cache misses).
    pub fn live_calls(&self) -> u64 {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn complete(
        &self,
        scope: &CallScope,
        template: TemplateId,
        messages: &[ChatMessage],
    ) -> Result<CompletionResult, LlmError> {
        let hash = prompt_hash(messages);
        let key = CacheKey {
            template,
            prompt_hash: hash.clone(),
            model_id: self.params.model_id.clone(),
            temperature: self.params.temperature,
        };
        let cached = match &self.cache {
            Some(cache) => cache.get(&key).map_err(LlmError::Cache)?,
            None => None,
        };
        let result = match cached {
            Some(hit) => {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                hit
            }
            None => {
                let fresh = self.call_with_retry(template, messages)?;
                if let Some(cache) = &self.cache {
                    cache.put(&key, &fresh).map_err(LlmError::Cache)?;
                }
                fresh
            }
        };
        scope.log.push(CallRecord {
            scope: scope.label.clone(),
            seq: scope.seq.fetch_add(1, Ordering::Relaxed),
            template,
            prompt_hash: hash,
            model_id: self.params.model_id.clone(),
            usage: result.usage.clone(),
        });
        Ok(result)
    }

    fn call_with_retry(
        &self,
        template: TemplateId,
        messages: &[ChatMessage],
    ) -> Result<CompletionResult, LlmError> {
        let request = CompletionRequest {
            template,
            messages,
            params: &self.params,
        };
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.complete(&request)
            };
            match outcome {
                Ok(mut result) => {
                    self.live_calls.fetch_add(1, Ordering::Relaxed);
                    result.usage.retries = attempt - 1;
                    if result.usage.latency_ms == 0 && self.backend.measures_latency() {
                        result.usage.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    return Ok(result);
                }
                Err(err) if err.is_retryable() && attempt < attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                    log::warn!("{template}: attempt {attempt} failed ({err}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(source) => {
                    return Err(LlmError::Backend {
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }

    /// Single user-message call returning the `[Response_Start]` payload.
    pub fn complete_delimited(
        &self,
        scope: &CallScope,
        template: TemplateId,
        messages: &[ChatMessage],
    ) -> Result<Delimited, LlmError> {
        let result = self.complete(scope, template, messages)?;
        Ok(extract_delimited(&result.text))
    }

    /// Calls and parses a JSON payload, re-asking once with [`JSON_REASK`]
    /// appended to the last message when parsing fails. Returns the value
    /// and the raw text it was parsed from.
    pub fn complete_json(
        &self,
        scope: &CallScope,
        template: TemplateId,
        messages: &[ChatMessage],
    ) -> Result<(serde_json::Value, String), LlmError> {
        let first = self.complete(scope, template, messages)?;
        if let Ok(v) = extract_json_payload(&first.text) {
            return Ok((v, first.text));
        }
        log::warn!("{template}: JSON parse failed, re-asking once");
        let mut retry = messages.to_vec();
        if let Some(last) = retry.last_mut() {
            last.content = format!("{}\n\n{JSON_REASK}", last.content);
        }
        let second = self.complete(scope, template, &retry)?;
        match extract_json_payload(&second.text) {
            Ok(v) => Ok((v, second.text)),
            Err(e) => Err(LlmError::Parse { template, raw: e.raw }),
        }
    }
}

/// Rough whitespace token count used by the mock backends.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
