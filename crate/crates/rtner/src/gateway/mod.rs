//! Uniform chat-completion access: response caching, retry with
//! exponential backoff, token-bucket rate limiting, in-flight
//! de-duplication, and deterministic mock oracles for offline runs.

mod cache;
mod mock;
mod remote;

pub use cache::{CacheEntry, CacheStats, ResponseCache};
pub use mock::{GoldOracle, NoisyOracle, ScriptedMock};
pub use remote::{RemoteBackend, RemoteParams, API_BASE_VAR, API_KEY_VAR};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sentence};
use crate::error::{Error, Result};
use crate::prompter::{sha256_hex, PromptStyle};

/// Decoding defaults: zero temperature for reproducibility.
pub const DEFAULT_TEMPERATURE: f32 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Forwarded to mocks for deterministic noise; not part of the cache key.
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::InvalidRequest("messages must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON of (model, messages, temperature,
    /// max_tokens).
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

pub struct BackendResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl BackendResponse {
    fn mock(text: String) -> Self {
        // Mocks approximate token costs by whitespace words.
        let completion_tokens = text.split_whitespace().count() as u64;
        BackendResponse {
            text,
            prompt_tokens: 0,
            completion_tokens,
        }
    }
}

pub trait Backend: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<BackendResponse>;
    fn describe(&self) -> String;
}

/// Exponential backoff: base, factor, attempts. Retries fire only on
/// timeouts, 5xx, and 429; other 4xx surface immediately.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2,
            max_attempts: 5,
        }
    }
}

fn retryable(error: &Error) -> bool {
    match error {
        Error::HttpStatus { status, .. } => *status == 429 || (500..=599).contains(status),
        Error::Http(e) => e.is_timeout() || e.is_connect() || e.is_request(),
        _ => false,
    }
}

/// Token bucket; refills continuously at `requests_per_minute / 60` per
/// second, burst capacity of one minute's quota.
struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    capacity: f64,
    per_second: f64,
}

impl TokenBucket {
    fn new(requests_per_minute: u32) -> Self {
        let capacity = requests_per_minute as f64;
        TokenBucket {
            state: Mutex::new((capacity, Instant::now())),
            capacity,
            per_second: capacity / 60.0,
        }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.per_second).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

type InflightSlot = Arc<(Mutex<Option<std::result::Result<String, String>>>, Condvar)>;

/// Backend selector for [`configure_backend`].
pub enum BackendKind {
    Remote(RemoteParams),
    ScriptedMock(Vec<String>),
    GoldOracleMock {
        gold: Vec<Sentence>,
        style: PromptStyle,
        labels: Vec<Label>,
    },
    NoisyOracleMock {
        gold: Vec<Sentence>,
        style: PromptStyle,
        labels: Vec<Label>,
        p: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub deduplicated: u64,
    pub cache: CacheStats,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: ResponseCache,
    inflight: Mutex<HashMap<String, InflightSlot>>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    deduplicated: AtomicU64,
}

/// Builds a gateway over the chosen backend. Mock backends run unthrottled
/// by default; the remote backend defaults to 60 requests/minute.
pub fn configure_backend(kind: BackendKind) -> Result<Gateway> {
    GatewayBuilder::new(kind).build()
}

pub struct GatewayBuilder {
    kind: BackendKind,
    cache_path: Option<PathBuf>,
    retry: RetryPolicy,
    requests_per_minute: Option<u32>,
}

impl GatewayBuilder {
    pub fn new(kind: BackendKind) -> Self {
        let requests_per_minute = match kind {
            BackendKind::Remote(_) => Some(60),
            _ => None,
        };
        GatewayBuilder {
            kind,
            cache_path: None,
            retry: RetryPolicy::default(),
            requests_per_minute,
        }
    }

    /// Persist the response cache at `path` (JSONL, append-only).
    pub fn cache_path(mut self, path: PathBuf) -> Self {
        self.cache_path = Some(path);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn requests_per_minute(mut self, rpm: Option<u32>) -> Self {
        self.requests_per_minute = rpm;
        self
    }

    pub fn build(self) -> Result<Gateway> {
        let backend: Box<dyn Backend> = match self.kind {
            BackendKind::Remote(params) => Box::new(RemoteBackend::new(params)?),
            BackendKind::ScriptedMock(responses) => Box::new(ScriptedMock::new(responses)),
            BackendKind::GoldOracleMock { gold, style, labels } => {
                Box::new(GoldOracle::new(&gold, style, labels))
            }
            BackendKind::NoisyOracleMock {
                gold,
                style,
                labels,
                p,
                seed,
            } => Box::new(NoisyOracle::new(GoldOracle::new(&gold, style, labels), p, seed)),
        };
        let cache = match &self.cache_path {
            Some(path) => ResponseCache::open(path)?,
            None => ResponseCache::ephemeral(),
        };
        Ok(Gateway {
            backend,
            cache,
            inflight: Mutex::new(HashMap::new()),
            retry: self.retry,
            limiter: self.requests_per_minute.map(TokenBucket::new),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            deduplicated: AtomicU64::new(0),
        })
    }
}

impl Gateway {
    /// Cached chat completion. A hit returns the stored text with zero
    /// backend calls; identical concurrent requests collapse into one.
    pub fn chat(&self, request: &ChatRequest) -> Result<String> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(entry) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(entry.response_text);
        }

        enum Role {
            Leader(InflightSlot),
            Follower(InflightSlot),
        }
        let role = {
            let mut inflight = self.inflight.lock().unwrap();
            match inflight.get(&key) {
                Some(slot) => Role::Follower(Arc::clone(slot)),
                None => {
                    let slot: InflightSlot = Arc::new((Mutex::new(None), Condvar::new()));
                    inflight.insert(key.clone(), Arc::clone(&slot));
                    Role::Leader(slot)
                }
            }
        };

        match role {
            Role::Follower(slot) => {
                self.deduplicated.fetch_add(1, Ordering::Relaxed);
                let (lock, cvar) = &*slot;
                let mut result = lock.lock().unwrap();
                while result.is_none() {
                    result = cvar.wait(result).unwrap();
                }
                match result.as_ref().unwrap() {
                    Ok(text) => Ok(text.clone()),
                    Err(reason) => Err(Error::GatewayFailure {
                        query_id: String::new(),
                        reason: reason.clone(),
                    }),
                }
            }
            Role::Leader(slot) => {
                // The losing leader of a previous round may have populated
                // the cache between our read and the slot insert.
                let outcome = match self.cache.get(&key) {
                    Some(entry) => {
                        self.cache_hits.fetch_add(1, Ordering::Relaxed);
                        Ok(entry.response_text)
                    }
                    None => self.call_backend(request, &key),
                };
                let (lock, cvar) = &*slot;
                *lock.lock().unwrap() = Some(match &outcome {
                    Ok(text) => Ok(text.clone()),
                    Err(e) => Err(e.to_string()),
                });
                cvar.notify_all();
                self.inflight.lock().unwrap().remove(&key);
                outcome
            }
        }
    }

    fn call_backend(&self, request: &ChatRequest, key: &str) -> Result<String> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let mut last_error: Option<Error> = None;
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let backoff = self.retry.base * self.retry.factor.pow(attempt - 1);
                std::thread::sleep(backoff);
            }
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.call(request) {
                Ok(response) => {
                    let entry = CacheEntry {
                        key: key.to_string(),
                        response_text: response.text.clone(),
                        created_at: SystemTime::now()
                            .duration_since(SystemTime::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0),
                        cost_tokens: (response.prompt_tokens, response.completion_tokens),
                    };
                    self.cache.put(entry)?;
                    return Ok(response.text);
                }
                Err(e) if retryable(&e) => last_error = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::RetriesExhausted {
            attempts: self.retry.max_attempts,
            last_error: last_error.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            deduplicated: self.deduplicated.load(Ordering::Relaxed),
            cache: self.cache.stats(),
        }
    }

    pub fn describe_backend(&self) -> String {
        self.backend.describe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            model: "test-model".into(),
            messages: vec![Message::user(text)],
            temperature: 0.0,
            max_tokens: 32,
            seed_hint: None,
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            base: Duration::from_millis(1),
            factor: 2,
            max_attempts: 5,
        }
    }

    #[test]
    fn identical_request_hits_cache_with_zero_backend_calls() {
        let gateway = configure_backend(BackendKind::ScriptedMock(vec!["A".into()])).unwrap();
        assert_eq!(gateway.chat(&request("hello")).unwrap(), "A");
        let calls_after_first = gateway.stats().backend_calls;
        assert_eq!(gateway.chat(&request("hello")).unwrap(), "A");
        assert_eq!(gateway.stats().backend_calls, calls_after_first);
        assert_eq!(gateway.stats().cache_hits, 1);
    }

    #[test]
    fn scripted_mock_replays_in_order() {
        let gateway =
            configure_backend(BackendKind::ScriptedMock(vec!["A".into(), "B".into()])).unwrap();
        assert_eq!(gateway.chat(&request("one")).unwrap(), "A");
        assert_eq!(gateway.chat(&request("two")).unwrap(), "B");
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let gateway = configure_backend(BackendKind::ScriptedMock(vec![])).unwrap();
        let mut req = request("x");
        req.temperature = 3.0;
        assert!(matches!(gateway.chat(&req), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn remote_without_credential_is_a_config_error() {
        std::env::remove_var(API_KEY_VAR);
        let err = RemoteBackend::new(RemoteParams {
            endpoint: Some("http://127.0.0.1:1/v1".into()),
            api_key: None,
            timeout_secs: Some(1),
        })
        .unwrap_err();
        assert!(matches!(err, Error::BackendConfig(_)));
    }

    #[test]
    fn concurrent_identical_requests_collapse() {
        let gateway = Arc::new(
            GatewayBuilder::new(BackendKind::ScriptedMock(vec!["only".into()]))
                .retry(fast_retry())
                .build()
                .unwrap(),
        );
        let mut handles = Vec::new();
        for _ in 0..8 {
            let g = Arc::clone(&gateway);
            handles.push(std::thread::spawn(move || g.chat(&request("same")).unwrap()));
        }
        for h in handles {
            assert_eq!(h.join().unwrap(), "only");
        }
        // One leader called the backend; everyone else was a follower or
        // cache hit. The scripted queue had a single element, so any
        // second backend call would have errored.
        assert_eq!(gateway.stats().backend_calls, 1);
    }

    /// Minimal scripted HTTP server: each scripted item is (status, body).
    fn spawn_http_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<u32>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut served = 0u32;
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 65536];
                let mut data = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    data.extend_from_slice(&buf[..n]);
                    if let Some(pos) = find_header_end(&data) {
                        let headers = String::from_utf8_lossy(&data[..pos]);
                        let content_length = headers
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if data.len() >= pos + 4 + content_length {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reason = if status == 200 { "OK" } else { "ERR" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
                served += 1;
            }
            served
        });
        (format!("http://{addr}/chat"), handle)
    }

    fn find_header_end(data: &[u8]) -> Option<usize> {
        data.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        })
        .to_string()
    }

    #[test]
    fn remote_backend_round_trip_and_5xx_retry() {
        let (endpoint, server) = spawn_http_server(vec![
            (500, "{}".into()),
            (200, ok_body("recovered fine")),
        ]);
        let gateway = GatewayBuilder::new(BackendKind::Remote(RemoteParams {
            endpoint: Some(endpoint),
            api_key: Some("test-key".into()),
            timeout_secs: Some(5),
        }))
        .retry(fast_retry())
        .requests_per_minute(None)
        .build()
        .unwrap();
        let text = gateway.chat(&request("ping")).unwrap();
        assert_eq!(text, "recovered fine");
        assert_eq!(gateway.stats().backend_calls, 2);
        assert_eq!(server.join().unwrap(), 2);
        assert_eq!(gateway.stats().cache.completion_tokens, 3);
    }

    #[test]
    fn remote_4xx_is_not_retried() {
        let (endpoint, server) = spawn_http_server(vec![(400, "{\"error\": \"bad\"}".into())]);
        let gateway = GatewayBuilder::new(BackendKind::Remote(RemoteParams {
            endpoint: Some(endpoint),
            api_key: Some("test-key".into()),
            timeout_secs: Some(5),
        }))
        .retry(fast_retry())
        .requests_per_minute(None)
        .build()
        .unwrap();
        match gateway.chat(&request("ping")) {
            Err(Error::HttpStatus { status, body }) => {
                assert_eq!(status, 400);
                assert!(body.contains("bad"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(gateway.stats().backend_calls, 1);
        server.join().unwrap();
    }

    #[test]
    fn retries_exhaust_on_persistent_5xx() {
        let (endpoint, server) =
            spawn_http_server((0..3).map(|_| (503u16, "{}".to_string())).collect());
        let gateway = GatewayBuilder::new(BackendKind::Remote(RemoteParams {
            endpoint: Some(endpoint),
            api_key: Some("k".into()),
            timeout_secs: Some(5),
        }))
        .retry(RetryPolicy {
            base: Duration::from_millis(1),
            factor: 2,
            max_attempts: 3,
        })
        .requests_per_minute(None)
        .build()
        .unwrap();
        match gateway.chat(&request("ping")) {
            Err(Error::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn cache_file_survives_process_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let gateway = GatewayBuilder::new(BackendKind::ScriptedMock(vec!["X".into()]))
                .cache_path(path.clone())
                .build()
                .unwrap();
            assert_eq!(gateway.chat(&request("q")).unwrap(), "X");
        }
        // Fresh gateway, same cache file, empty scripted queue: the answer
        // must come from the cache with zero backend calls.
        let gateway = GatewayBuilder::new(BackendKind::ScriptedMock(vec![]))
            .cache_path(path)
            .build()
            .unwrap();
        assert_eq!(gateway.chat(&request("q")).unwrap(), "X");
        assert_eq!(gateway.stats().backend_calls, 0);
    }
}
