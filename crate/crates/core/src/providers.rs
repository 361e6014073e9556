//! Chat and embedding backends.
//!
//! [`HttpProvider`] speaks the OpenAI-compatible `/chat/completions` and
//! `/embeddings` endpoints (hosted APIs, Ollama, vLLM, ...). [`MockProvider`]
//! answers chat calls from a script keyed by [`ChatRequest::key`] and embeds
//! text with a seeded hash projection, so whole pipelines run offline and
//! bit-deterministically.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Tolerance of the unit-norm invariant on [`EmbeddingVector`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("API error (status {status}): {body}")]
    Api { status: u16, body: String },
    #[error("unscripted prompt: no mock response for key `{key}`")]
    Unscripted { key: String },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    fn retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Api { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// One chat completion call.
///
/// `key` is a compact, human-readable identifier of the prompt's variable
/// inputs (for example `topic|<previous topic>|<turn text>`). Remote backends
/// ignore it; the mock backend answers by exact lookup on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub key: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        key: impl Into<String>,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
    ) -> Self {
        Self {
            key: key.into(),
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Fails on non-finite entries, zero
    /// norm, or fewer than two dimensions.
    pub fn from_raw(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.len() < 2 {
            return Err(ProviderError::InvalidResponse(format!(
                "embedding dimension {} < 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidResponse("embedding has non-finite values".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ProviderError::InvalidResponse("embedding has zero norm".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm, verifying the invariant.
    pub fn from_normalized(values: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.len() < 2
            || values.iter().any(|v| !v.is_finite())
            || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE
        {
            return Err(ProviderError::InvalidResponse(format!(
                "vector of dim {} is not unit-norm (norm {norm})",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dot product, which equals cosine similarity for unit vectors.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// A chat + embedding backend. Implementations must be shareable across threads.
pub trait Provider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError>;

    /// Backend embeddings, one per input and in input order, not necessarily normalized.
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;

    /// Embeds `texts` and L2-normalizes every vector regardless of backend behavior.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("embed called with no texts".into()));
        }
        let raw = self.embed_raw(texts)?;
        if raw.len() != texts.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                raw.len()
            )));
        }
        raw.into_iter().map(EmbeddingVector::from_raw).collect()
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let mut v = self.embed(&[text.to_owned()])?;
        Ok(v.remove(0))
    }
}

impl<P: Provider + ?Sized> Provider for &P {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(req)
    }
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed_raw(texts)
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(req)
    }
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed_raw(texts)
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The mock embedding before normalization.
///
/// State starts at `fnv1a64(text) ^ (seed * GOLDEN_GAMMA)`; each coordinate
/// advances the state by `GOLDEN_GAMMA`, applies the splitmix64 finalizer,
/// and maps the top 53 bits to `[-1, 1)`.
pub fn mock_embedding_raw(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut state = fnv1a64(text) ^ seed.wrapping_mul(GOLDEN_GAMMA);
    (0..dim)
        .map(|_| {
            state = state.wrapping_add(GOLDEN_GAMMA);
            let z = splitmix64_mix(state);
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Script entry: one fixed reply, or a sequence consumed call by call with
/// the last reply repeating once the sequence is exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    One(String),
    Sequence(Vec<String>),
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::One(s.to_owned())
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::One(s)
    }
}

pub type MockScript = BTreeMap<String, ScriptedReply>;

/// Deterministic scripted backend. Chat replies are looked up by request key;
/// a script key ending in `*` matches any request key with that prefix.
#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    embed_seed: u64,
    dim: usize,
    calls: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockProvider {
    pub fn new(script: MockScript, embed_seed: u64, dim: usize) -> Result<Self, ProviderError> {
        if dim < 2 {
            return Err(ProviderError::InvalidRequest(format!("mock dim {dim} < 2")));
        }
        Ok(Self {
            script,
            embed_seed,
            dim,
            calls: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        })
    }

    /// Builds a mock from `(key, reply)` pairs.
    pub fn with_replies<K: Into<String>, V: Into<ScriptedReply>>(
        replies: impl IntoIterator<Item = (K, V)>,
        embed_seed: u64,
        dim: usize,
    ) -> Result<Self, ProviderError> {
        let script = replies.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        Self::new(script, embed_seed, dim)
    }

    /// Parses a JSON object `{ key: reply | [reply, ...] }`.
    pub fn script_from_json(raw: &str) -> Result<MockScript, ProviderError> {
        serde_json::from_str(raw)
            .map_err(|e| ProviderError::InvalidRequest(format!("bad mock script: {e}")))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.embed_seed
    }

    /// All chat requests seen so far, in call order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    /// Exact key first, then the longest `prefix*` entry matching the key.
    fn lookup(&self, key: &str) -> Option<&ScriptedReply> {
        if let Some(r) = self.script.get(key) {
            return Some(r);
        }
        self.script
            .iter()
            .filter_map(|(k, r)| Some((k.strip_suffix('*')?, r)))
            .filter(|(prefix, _)| key.starts_with(prefix))
            .max_by_key(|(prefix, _)| prefix.len())
            .map(|(_, r)| r)
    }
}

impl Provider for MockProvider {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        self.log.lock().expect("mock log poisoned").push(req.clone());
        let reply = self.lookup(&req.key).ok_or_else(|| ProviderError::Unscripted {
            key: req.key.clone(),
        })?;
        match reply {
            ScriptedReply::One(s) => Ok(s.clone()),
            ScriptedReply::Sequence(seq) if seq.is_empty() => Err(ProviderError::Unscripted {
                key: req.key.clone(),
            }),
            ScriptedReply::Sequence(seq) => {
                let mut calls = self.calls.lock().expect("mock counters poisoned");
                let n = calls.entry(req.key.clone()).or_insert(0);
                let out = seq[(*n).min(seq.len() - 1)].clone();
                *n += 1;
                Ok(out)
            }
        }
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| mock_embedding_raw(t, self.embed_seed, self.dim))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub concurrency_limit: usize,
    /// First backoff delay; doubles on each retry.
    pub retry_base_delay_ms: u64,
    /// Embedding inputs longer than this many characters are truncated.
    pub max_input_chars: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434/v1".into(),
            model_name: String::new(),
            api_key: String::new(),
            timeout_secs: 60.0,
            max_retries: 3,
            concurrency_limit: 4,
            retry_base_delay_ms: 500,
            max_input_chars: 8000,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.concurrency_limit == 0 {
            return Err(ProviderError::InvalidRequest("concurrency_limit must be >= 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("base_url is empty".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ProviderError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct AdmissionGate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a AdmissionGate);

impl AdmissionGate {
    fn new(limit: usize) -> Self {
        Self {
            free: Mutex::new(limit),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
struct Endpoint {
    cfg: ProviderConfig,
    agent: ureq::Agent,
    gate: AdmissionGate,
}

impl Endpoint {
    fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            gate: AdmissionGate::new(cfg.concurrency_limit),
            agent: ureq::Agent::new_with_config(config),
            cfg,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &str, attempt: u32) -> Result<Value, ProviderError> {
        let _permit = self.gate.acquire();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if !self.cfg.api_key.is_empty() {
            req = req.header("Authorization", format!("Bearer {}", self.cfg.api_key));
        }
        let mut resp = req.send(body).map_err(|e| ProviderError::Transport {
            attempts: attempt + 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport {
                attempts: attempt + 1,
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Api {
                status,
                body: excerpt(&text, 300),
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::InvalidResponse(format!("non-JSON body: {e}")))
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx with
    /// exponential backoff up to `max_retries` extra attempts.
    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = self.url(path);
        let body = body.to_string();
        let mut attempt = 0;
        loop {
            match self.post_once(&url, &body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.retry_base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{url}: attempt {} failed ({e}); retrying in {delay} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(ProviderError::Transport { message, .. }) => {
                    return Err(ProviderError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn excerpt(s: &str, max_chars: usize) -> String {
    match s.char_indices().nth(max_chars) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_owned(),
    }
}

/// OpenAI-compatible backend; chat and embeddings may live on different servers.
#[derive(Debug)]
pub struct HttpProvider {
    chat: Endpoint,
    embed: Endpoint,
}

impl HttpProvider {
    pub fn new(chat: ProviderConfig, embed: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            chat: Endpoint::new(chat)?,
            embed: Endpoint::new(embed)?,
        })
    }
}

impl Provider for HttpProvider {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let body = json!({
            "model": self.chat.cfg.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp = self.chat.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                ProviderError::InvalidResponse("missing choices[0].message.content".into())
            })
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let limit = self.embed.cfg.max_input_chars;
        let inputs: Vec<&str> = texts
            .iter()
            .map(|t| match t.char_indices().nth(limit) {
                Some((i, _)) => {
                    log::warn!("embedding input of {} chars truncated to {limit}", t.chars().count());
                    &t[..i]
                }
                None => t.as_str(),
            })
            .collect();
        let body = json!({ "model": self.embed.cfg.model_name, "input": inputs });
        let resp = self.embed.post("embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::InvalidResponse("missing embedding".into()))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
