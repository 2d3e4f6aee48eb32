//! Chat-completion client for a local Ollama-compatible model server, plus a
//! scripted mock backend for tests.
//!
//! Requests go to `POST {server_url}/api/chat` with `stream: false`; the
//! completion text is read from `message.content`. Model availability is
//! checked with `GET {server_url}/api/tags`.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::prompting::PromptBundle;

pub const SERVER_URL_ENV: &str = "EXTRACTINATOR_SERVER_URL";
pub const DEFAULT_SERVER_URL: &str = "http://localhost:11434";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("model server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("model {0:?} not found on the server")]
    ModelNotFound(String),
    #[error("request timed out")]
    Timeout,
    #[error("prompt exceeds the context window: {0}")]
    ContextOverflow(String),
    #[error("unexpected server response: {0}")]
    Protocol(String),
    #[error("mock script exhausted for key {0:?}")]
    ScriptExhausted(String),
}

impl ClientError {
    /// Infrastructure failures that must abort a run rather than be absorbed
    /// by the repair loop.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::ServerUnreachable(_) | ClientError::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_name: String,
    pub temperature: f64,
    pub context_length: u64,
    pub server_url: String,
    pub max_in_flight: usize,
    #[serde(with = "secs")]
    pub request_timeout: Duration,
    pub seed: Option<u64>,
    /// Ask the server for JSON-constrained decoding (`"format": "json"`).
    #[serde(default)]
    pub json_format: bool,
}

impl ModelConfig {
    pub fn new(model_name: impl Into<String>) -> Self {
        ModelConfig {
            model_name: model_name.into(),
            temperature: 0.0,
            context_length: 8192,
            server_url: std::env::var(SERVER_URL_ENV).unwrap_or_else(|_| DEFAULT_SERVER_URL.to_string()),
            max_in_flight: 1,
            request_timeout: Duration::from_secs(600),
            seed: None,
            json_format: false,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.context_length == 0 {
            return Err("context_length must be positive".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be positive".into());
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    #[serde(with = "secs")]
    pub latency: Duration,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
            latency: Duration::ZERO,
        }
    }
}

/// One chat call. `case_key` lets the mock route scripted replies per case.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub bundle: &'a PromptBundle,
    pub config: &'a ModelConfig,
    pub case_key: Option<&'a str>,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<Completion, ClientError>;
    fn list_models(&self, config: &ModelConfig) -> Result<Vec<String>, ClientError>;
}

/// The `/api/chat` request body. Key order is fixed so identical inputs give
/// identical bytes.
pub fn request_body(bundle: &PromptBundle, config: &ModelConfig) -> Value {
    let mut options = Map::new();
    options.insert("temperature".into(), json!(config.temperature));
    options.insert("num_ctx".into(), json!(config.context_length));
    if let Some(seed) = config.seed {
        options.insert("seed".into(), json!(seed));
    }
    let mut body = Map::new();
    body.insert("model".into(), json!(config.model_name));
    body.insert(
        "messages".into(),
        json!([
            {"role": "system", "content": bundle.system},
            {"role": "user", "content": bundle.user},
        ]),
    );
    body.insert("stream".into(), json!(false));
    if config.json_format {
        body.insert("format".into(), json!("json"));
    }
    body.insert("options".into(), Value::Object(options));
    Value::Object(body)
}

/// Hex SHA-256 of the system and user text, used as a mock script key.
pub fn prompt_hash(bundle: &PromptBundle) -> String {
    let mut h = Sha256::new();
    h.update(bundle.system.as_bytes());
    h.update([0u8]);
    h.update(bundle.user.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn model_matches(available: &str, wanted: &str) -> bool {
    available == wanted
        || available.strip_suffix(":latest") == Some(wanted)
        || wanted.strip_suffix(":latest") == Some(available)
}

/// HTTP backend speaking the Ollama wire protocol.
#[derive(Debug, Clone, Default)]
pub struct OllamaBackend;

impl OllamaBackend {
    fn map_error(err: crate::http::HttpError, model: &str) -> ClientError {
        use crate::http::HttpError;
        match err {
            HttpError::Connect(e) => ClientError::ServerUnreachable(e),
            HttpError::Timeout => ClientError::Timeout,
            HttpError::Status { status, body } => {
                let message = serde_json::from_str::<Value>(&body)
                    .ok()
                    .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or(body);
                let lower = message.to_lowercase();
                if status == 404 || (lower.contains("model") && lower.contains("not found")) {
                    ClientError::ModelNotFound(model.to_string())
                } else if lower.contains("context") && (lower.contains("exceed") || lower.contains("too long")) {
                    ClientError::ContextOverflow(message)
                } else {
                    ClientError::Protocol(format!("HTTP {status}: {message}"))
                }
            }
            HttpError::Malformed(m) => ClientError::Protocol(m),
        }
    }
}

impl ChatBackend for OllamaBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        let config = request.config;
        let url = format!("{}/api/chat", config.server_url.trim_end_matches('/'));
        let body = serde_json::to_vec(&request_body(request.bundle, config)).expect("body serializes");
        let started = Instant::now();
        let send = || crate::http::post_json(&url, &body, config.request_timeout);
        // one reconnect on connection failure
        let response = match send() {
            Err(crate::http::HttpError::Connect(_)) => send(),
            other => other,
        }
        .map_err(|e| Self::map_error(e, &config.model_name))?;
        let latency = started.elapsed();
        let value: Value = serde_json::from_slice(&response)
            .map_err(|e| ClientError::Protocol(format!("invalid JSON body: {e}")))?;
        if let Some(err) = value.get("error").and_then(Value::as_str) {
            return Err(Self::map_error(
                crate::http::HttpError::Status {
                    status: 500,
                    body: json!({"error": err}).to_string(),
                },
                &config.model_name,
            ));
        }
        let text = value
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Protocol("response lacks message.content".into()))?
            .to_string();
        Ok(Completion {
            text,
            prompt_tokens: value.get("prompt_eval_count").and_then(Value::as_u64),
            completion_tokens: value.get("eval_count").and_then(Value::as_u64),
            latency,
        })
    }

    fn list_models(&self, config: &ModelConfig) -> Result<Vec<String>, ClientError> {
        let url = format!("{}/api/tags", config.server_url.trim_end_matches('/'));
        let response = crate::http::get(&url, config.request_timeout)
            .map_err(|e| Self::map_error(e, &config.model_name))?;
        let value: Value = serde_json::from_slice(&response)
            .map_err(|e| ClientError::Protocol(format!("invalid JSON body: {e}")))?;
        let models = value
            .get("models")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Protocol("response lacks \"models\"".into()))?;
        Ok(models
            .iter()
            .filter_map(|m| m.get("name").or_else(|| m.get("model")).and_then(Value::as_str))
            .map(str::to_string)
            .collect())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(permits: usize) -> Self {
        InFlightLimiter {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap();
        while *free == 0 {
            free = self.freed.wait(free).unwrap();
        }
        *free -= 1;
        Permit { limiter: self }
    }
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.permits.lock().unwrap() += 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AvailabilityReport {
    pub server_url: String,
    pub server_alive: bool,
    pub model: String,
    pub model_available: bool,
    pub available_models: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
}

/// Shareable client; at most `max_in_flight` requests are outstanding.
#[derive(Clone)]
pub struct ModelClient {
    backend: Arc<dyn ChatBackend>,
    limiter: Arc<InFlightLimiter>,
}

impl ModelClient {
    pub fn new(backend: Arc<dyn ChatBackend>, max_in_flight: usize) -> Self {
        ModelClient {
            backend,
            limiter: Arc::new(InFlightLimiter::new(max_in_flight)),
        }
    }

    pub fn ollama(max_in_flight: usize) -> Self {
        Self::new(Arc::new(OllamaBackend), max_in_flight)
    }

    pub fn generate(
        &self,
        bundle: &PromptBundle,
        config: &ModelConfig,
        case_key: Option<&str>,
    ) -> Result<Completion, ClientError> {
        let _permit = self.limiter.acquire();
        self.backend.chat(&ChatRequest {
            bundle,
            config,
            case_key,
        })
    }

    /// Confirms server liveness and that the configured model is present.
    /// Only an unreachable server is an error; a missing model is reported.
    pub fn check_model(&self, config: &ModelConfig) -> Result<AvailabilityReport, ClientError> {
        let models = self.backend.list_models(config)?;
        let available = models.iter().any(|m| model_matches(m, &config.model_name));
        Ok(AvailabilityReport {
            server_url: config.server_url.clone(),
            server_alive: true,
            model: config.model_name.clone(),
            model_available: available,
            problem: (!available).then(|| ClientError::ModelNotFound(config.model_name.clone()).to_string()),
            available_models: models,
        })
    }
}

/// A scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    Text(String),
    /// Syntactically broken JSON.
    MalformedJson,
    Fail(MockFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Unreachable,
    Timeout,
    ContextOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockStep {
    pub reply: MockReply,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl MockStep {
    pub fn text(text: impl Into<String>) -> Self {
        MockStep {
            reply: MockReply::Text(text.into()),
            truncate_at: None,
            delay_ms: None,
        }
    }

    pub fn malformed() -> Self {
        MockStep {
            reply: MockReply::MalformedJson,
            truncate_at: None,
            delay_ms: None,
        }
    }

    pub fn fail(kind: MockFailure) -> Self {
        MockStep {
            reply: MockReply::Fail(kind),
            truncate_at: None,
            delay_ms: None,
        }
    }

    pub fn truncate_at(mut self, n: usize) -> Self {
        self.truncate_at = Some(n);
        self
    }

    pub fn delay_ms(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }
}

pub const MALFORMED_JSON_TEXT: &str = "{\"answer\": [1, 2,, \"unterminated";

/// Serialized mock script: reply queues per key (case uid or prompt hash) and
/// an optional fallback queue under `"*"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub replies: HashMap<String, Vec<MockStep>>,
}

type Responder = dyn Fn(&ChatRequest<'_>) -> Option<MockStep> + Send + Sync;

/// Deterministic scripted backend. Each request consumes the next step queued
/// for its case key, then its prompt hash, then `"*"`; a responder closure,
/// if set, answers whatever the queues do not.
pub struct MockBackend {
    models: Vec<String>,
    queues: Mutex<HashMap<String, VecDeque<MockStep>>>,
    responder: Option<Box<Responder>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
    log: Mutex<Vec<(Option<String>, PromptBundle, String)>>,
}

impl MockBackend {
    pub fn new<I, S>(models: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MockBackend {
            models: models.into_iter().map(Into::into).collect(),
            queues: Mutex::new(HashMap::new()),
            responder: None,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        let mock = Self::new(script.models);
        {
            let mut queues = mock.queues.lock().unwrap();
            for (k, steps) in script.replies {
                queues.insert(k, steps.into());
            }
        }
        mock
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest<'_>) -> Option<MockStep> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn push(&self, key: impl Into<String>, steps: impl IntoIterator<Item = MockStep>) {
        self.queues
            .lock()
            .unwrap()
            .entry(key.into())
            .or_default()
            .extend(steps);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously executing requests observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// (case key, prompt, completion text) for every answered call, in call order.
    pub fn transcript(&self) -> Vec<(Option<String>, PromptBundle, String)> {
        self.log.lock().unwrap().clone()
    }

    fn next_step(&self, request: &ChatRequest<'_>) -> Result<MockStep, ClientError> {
        let hash = prompt_hash(request.bundle);
        {
            let mut queues = self.queues.lock().unwrap();
            let keys = request.case_key.into_iter().chain([hash.as_str(), "*"]);
            for key in keys {
                if let Some(step) = queues.get_mut(key).and_then(VecDeque::pop_front) {
                    return Ok(step);
                }
            }
        }
        if let Some(step) = self.responder.as_ref().and_then(|r| r(request)) {
            return Ok(step);
        }
        Err(ClientError::ScriptExhausted(
            request.case_key.map_or(hash, str::to_string),
        ))
    }

    fn play(&self, request: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        if !self.models.iter().any(|m| model_matches(m, &request.config.model_name)) {
            return Err(ClientError::ModelNotFound(request.config.model_name.clone()));
        }
        let step = self.next_step(request)?;
        if let Some(ms) = step.delay_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        let mut text = match step.reply {
            MockReply::Text(t) => t,
            MockReply::MalformedJson => MALFORMED_JSON_TEXT.to_string(),
            MockReply::Fail(MockFailure::Unreachable) => {
                return Err(ClientError::ServerUnreachable("mock: connection refused".into()))
            }
            MockReply::Fail(MockFailure::Timeout) => return Err(ClientError::Timeout),
            MockReply::Fail(MockFailure::ContextOverflow) => {
                return Err(ClientError::ContextOverflow("mock: prompt too long".into()))
            }
        };
        if let Some(n) = step.truncate_at {
            text = text.chars().take(n).collect();
        }
        Ok(Completion::text(text))
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        let result = self.play(request);
        if let Ok(c) = &result {
            self.log.lock().unwrap().push((
                request.case_key.map(str::to_string),
                request.bundle.clone(),
                c.text.clone(),
            ));
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn list_models(&self, _config: &ModelConfig) -> Result<Vec<String>, ClientError> {
        Ok(self.models.clone())
    }
}

/// Backend for which every call fails as if the server were down.
#[derive(Debug, Clone, Default)]
pub struct DeadBackend;

impl ChatBackend for DeadBackend {
    fn chat(&self, _request: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        Err(ClientError::ServerUnreachable("connection refused".into()))
    }

    fn list_models(&self, _config: &ModelConfig) -> Result<Vec<String>, ClientError> {
        Err(ClientError::ServerUnreachable("connection refused".into()))
    }
}
