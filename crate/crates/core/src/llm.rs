//! Chat-completion client with live, cached-live and replay backends.
//!
//! Every request is keyed by [`request_digest`], a SHA-256 over the fields
//! that determine the model output. The cache and the replay fixture are both
//! addressed by that digest, so a run recorded against a live endpoint can be
//! replayed offline bit-for-bit.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Context window shared by prompt and response.
pub const CONTEXT_WINDOW: usize = 4097;
/// Floor for the response token allowance.
pub const MIN_RESPONSE_TOKENS: usize = 256;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("upstream returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("upstream failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("unexpected response body: {0}")]
    InvalidResponse(String),
    #[error("replay fixture has no entry for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("cache io error at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LlmError {
    /// True when the upstream API stayed unavailable through every retry.
    pub fn is_upstream_exhaustion(&self) -> bool {
        matches!(self, LlmError::Exhausted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Optional system message; part of the digest only when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
}

impl CompletionRequest {
    /// Greedy-decoding request (temperature 0).
    pub fn greedy(model: impl Into<String>, prompt: impl Into<String>, max_tokens: u32) -> Self {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens,
            system: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        CompletionResponse {
            text: text.into(),
            finish_reason: None,
            usage: None,
        }
    }
}

/// Stable content hash of a request, hex encoded.
pub fn request_digest(req: &CompletionRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"seedpad-request-v1");
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(req.model.as_bytes());
    field(req.prompt.as_bytes());
    field(&req.temperature.to_bits().to_le_bytes());
    field(&req.max_tokens.to_le_bytes());
    if let Some(system) = &req.system {
        field(b"system");
        field(system.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Response allowance left in the context window after the prompt, floored.
pub fn default_max_tokens(prompt_tokens: usize) -> u32 {
    CONTEXT_WINDOW
        .saturating_sub(prompt_tokens)
        .max(MIN_RESPONSE_TOKENS) as u32
}

/// Something that answers completion requests.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError>;

    /// Number of network round-trips issued so far.
    fn network_calls(&self) -> u64 {
        0
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(req)
    }

    fn network_calls(&self) -> u64 {
        (**self).network_calls()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(req)
    }

    fn network_calls(&self) -> u64 {
        (**self).network_calls()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// First backoff; doubles on each subsequent retry.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_base_ms: 1000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

/// Chat-completions over HTTP.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl HttpBackend {
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            retry,
            http,
            calls: AtomicU64::new(0),
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<CompletionResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rb = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        parse_chat_response(&text)
    }
}

fn retryable(err: &LlmError) -> bool {
    match err {
        LlmError::Transport(_) => true,
        LlmError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Request body in chat-completions form.
pub fn chat_request_body(req: &CompletionRequest) -> serde_json::Value {
    let mut messages = Vec::new();
    if let Some(system) = &req.system {
        messages.push(serde_json::json!({"role": "system", "content": system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": req.prompt}));
    serde_json::json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

pub fn parse_chat_response(body: &str) -> Result<CompletionResponse, LlmError> {
    #[derive(Deserialize)]
    struct Message {
        content: Option<String>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
        finish_reason: Option<String>,
    }
    #[derive(Deserialize)]
    struct Body {
        choices: Vec<Choice>,
        usage: Option<Usage>,
    }
    let parsed: Body =
        serde_json::from_str(body).map_err(|e| LlmError::InvalidResponse(format!("{e}: {body}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::InvalidResponse("no choices".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| LlmError::InvalidResponse("choice without content".into()))?;
    Ok(CompletionResponse {
        text,
        finish_reason: choice.finish_reason,
        usage: parsed.usage,
    })
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let body = chat_request_body(req);
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(e) if retryable(&e) => {
                    if retry >= self.retry.max_retries {
                        return Err(LlmError::Exhausted {
                            attempts: retry + 1,
                            last: e.to_string(),
                        });
                    }
                    let wait = self.retry.backoff(retry);
                    log::warn!("upstream error ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    digest: String,
    response: CompletionResponse,
}

/// Disk cache in front of another backend. One file per digest, written to a
/// temporary name and renamed into place, so a torn write is never visible.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    upstream: AtomicU64,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Cache {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(CachedBackend {
            inner,
            dir,
            locks: Mutex::new(HashMap::new()),
            upstream: AtomicU64::new(0),
        })
    }

    /// Requests forwarded to the inner backend.
    pub fn upstream_calls(&self) -> u64 {
        self.upstream.load(Ordering::SeqCst)
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    fn lookup(&self, digest: &str) -> Option<CompletionResponse> {
        let bytes = fs::read(self.entry_path(digest)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.digest == digest).then_some(entry.response)
    }

    fn store(&self, digest: &str, response: &CompletionResponse) -> Result<(), LlmError> {
        let path = self.entry_path(digest);
        let tmp = self.dir.join(format!(".{digest}.{}.tmp", std::process::id()));
        let io_err = |source| LlmError::Cache {
            path: tmp.display().to_string(),
            source,
        };
        let entry = CacheEntry {
            digest: digest.to_string(),
            response: response.clone(),
        };
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&serde_json::to_vec(&entry).expect("cache entry serializes"))
            .map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)
    }

    fn digest_lock(&self, digest: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock map poisoned");
        locks.entry(digest.to_string()).or_default().clone()
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let digest = request_digest(req);
        let lock = self.digest_lock(&digest);
        let _guard = lock.lock().expect("digest lock poisoned");
        if let Some(hit) = self.lookup(&digest) {
            log::debug!("cache hit {digest}");
            return Ok(hit);
        }
        self.upstream.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(req)?;
        self.store(&digest, &response)?;
        Ok(response)
    }

    fn network_calls(&self) -> u64 {
        self.inner.network_calls()
    }
}

/// Digest → response text, stored as line-delimited `{digest, response}` records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayFixture {
    entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct FixtureLine {
    digest: String,
    response: String,
}

impl ReplayFixture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, digest: impl Into<String>, response: impl Into<String>) {
        self.entries.insert(digest.into(), response.into());
    }

    pub fn get(&self, digest: &str) -> Option<&str> {
        self.entries.get(digest).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| {
                LlmError::Config(format!("replay fixture line {}: {e}", i + 1))
            })?;
            entries.insert(rec.digest, rec.response);
        }
        Ok(ReplayFixture { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Records sorted by digest.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (digest, response) in &self.entries {
            let line = FixtureLine {
                digest: digest.clone(),
                response: response.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("fixture line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        fs::write(path, self.to_jsonl()).map_err(|source| LlmError::Cache {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Fixture lookups only; never touches the network.
pub struct ReplayBackend {
    fixture: ReplayFixture,
}

impl ReplayBackend {
    pub fn new(fixture: ReplayFixture) -> Self {
        ReplayBackend { fixture }
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let digest = request_digest(req);
        match self.fixture.get(&digest) {
            Some(text) => Ok(CompletionResponse::text(text)),
            None => Err(LlmError::ReplayMiss { digest }),
        }
    }
}

/// Wraps a backend and keeps every successful exchange so it can be saved as
/// a replay fixture.
pub struct Recorder<B> {
    inner: B,
    seen: Mutex<ReplayFixture>,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Recorder {
            inner,
            seen: Mutex::new(ReplayFixture::new()),
        }
    }

    pub fn fixture(&self) -> ReplayFixture {
        self.seen.lock().expect("recorder poisoned").clone()
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let resp = self.inner.complete(req)?;
        self.seen
            .lock()
            .expect("recorder poisoned")
            .insert(request_digest(req), resp.text.clone());
        Ok(resp)
    }

    fn network_calls(&self) -> u64 {
        self.inner.network_calls()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Live,
    #[default]
    CachedLive,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub system_message: Option<String>,
    /// Log prompt bodies at trace level.
    pub log_prompts: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            backend: BackendKind::CachedLive,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo-0613".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout_secs: 120,
            cache_dir: None,
            fixture: None,
            system_message: None,
            log_prompts: false,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be >= 1".into()));
        }
        match self.backend {
            BackendKind::Replay if self.fixture.is_none() => {
                Err(LlmError::Config("replay backend requires a fixture path".into()))
            }
            BackendKind::CachedLive if self.cache_dir.is_none() => {
                Err(LlmError::Config("cached-live backend requires a cache dir".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, LlmError> {
        self.validate()?;
        let http = || {
            let key = std::env::var(&self.api_key_env).ok();
            HttpBackend::new(
                &self.base_url,
                key,
                self.retry,
                Duration::from_secs(self.timeout_secs),
            )
        };
        Ok(match self.backend {
            BackendKind::Live => Box::new(http()?),
            BackendKind::CachedLive => Box::new(CachedBackend::new(
                http()?,
                self.cache_dir.clone().expect("validated"),
            )?),
            BackendKind::Replay => Box::new(ReplayBackend::new(ReplayFixture::load(
                self.fixture.as_deref().expect("validated"),
            )?)),
        })
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter poisoned") -= 1;
        self.0.cv.notify_one();
    }
}

/// Shareable client: validates requests and bounds the number of
/// simultaneously open upstream requests.
pub struct Client {
    backend: Box<dyn Backend>,
    limiter: Limiter,
    model: String,
    system_message: Option<String>,
    log_prompts: bool,
}

impl Client {
    pub fn new(backend: Box<dyn Backend>, model: impl Into<String>, max_in_flight: usize) -> Self {
        Client {
            backend,
            limiter: Limiter {
                max: max_in_flight.max(1),
                in_flight: Mutex::new(0),
                cv: Condvar::new(),
            },
            model: model.into(),
            system_message: None,
            log_prompts: false,
        }
    }

    pub fn from_config(cfg: &ClientConfig) -> Result<Self, LlmError> {
        Ok(Self::with_backend(cfg, cfg.build_backend()?))
    }

    /// Client with the request settings of `cfg` but a caller-supplied
    /// backend; `cfg.backend` is ignored.
    pub fn with_backend(cfg: &ClientConfig, backend: Box<dyn Backend>) -> Self {
        let mut client = Client::new(backend, cfg.model.clone(), cfg.max_in_flight);
        client.system_message = cfg.system_message.clone();
        client.log_prompts = cfg.log_prompts;
        client
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    /// Greedy request for `prompt` against the configured model.
    pub fn request(&self, prompt: impl Into<String>, max_tokens: u32) -> CompletionRequest {
        let mut req = CompletionRequest::greedy(self.model.clone(), prompt, max_tokens);
        req.system = self.system_message.clone();
        req
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        if self.log_prompts {
            log::trace!("prompt {}:\n{}", request_digest(req), req.prompt);
        } else {
            log::debug!("request {}", request_digest(req));
        }
        self.backend.complete(req)
    }

    pub fn network_calls(&self) -> u64 {
        self.backend.network_calls()
    }
}
