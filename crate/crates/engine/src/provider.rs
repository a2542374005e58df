//! Model providers: the mock used for offline runs and a chat-completions
//! HTTP client.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use lexprobe_core::mock::{identify_probe, MockKnowledge, GARBLED_TEXT};
use lexprobe_core::{Battery, Word};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "LEXPROBE_API_KEY";
/// Optional override of the chat-completions base URL.
pub const API_BASE_ENV: &str = "LEXPROBE_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub system_message: Option<String>,
    pub user_message: String,
}

impl ProviderRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(ProviderError::BadRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.user_message.is_empty() {
            return Err(ProviderError::BadRequest("empty user message".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::BadRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResponse {
    pub text: String,
    pub latency: Duration,
    pub provider_meta: BTreeMap<String, String>,
}

impl ProviderResponse {
    pub fn text(text: impl Into<String>, latency: Duration) -> Self {
        Self {
            text: text.into(),
            latency,
            provider_meta: BTreeMap::new(),
        }
    }
}

/// Errors are split into transient ones, worth retrying, and fatal ones.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited by provider: {0}")]
    Throttled(String),
    #[error("provider server error: {0}")]
    Server(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("unknown model: {0}")]
    BadModel(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Timeout(_)
                | ProviderError::Throttled(_)
                | ProviderError::Server(_)
                | ProviderError::Network(_)
        )
    }
}

/// Implementations must tolerate concurrent calls.
#[async_trait]
pub trait Provider: Send + Sync {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;
}

/// Offline provider answering from a [`MockKnowledge`] table.
///
/// The word and prompt are recovered from the rendered message, so the
/// mock sees exactly what a real endpoint would. It also counts calls and
/// tracks peak concurrency for tests.
pub struct MockProvider {
    battery: Battery,
    knowledge: MockKnowledge,
    latency: Duration,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    per_pair: Mutex<HashMap<(Word, usize), u32>>,
    issued: Mutex<Vec<Instant>>,
}

impl MockProvider {
    pub fn new(battery: Battery, knowledge: MockKnowledge) -> Self {
        Self {
            battery,
            knowledge,
            latency: Duration::ZERO,
            calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            per_pair: Mutex::new(HashMap::new()),
            issued: Mutex::new(Vec::new()),
        }
    }

    /// Simulated response time for every call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn knowledge(&self) -> &MockKnowledge {
        &self.knowledge
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Instants at which calls arrived, in arrival order.
    pub fn issue_times(&self) -> Vec<Instant> {
        self.issued.lock().expect("issue log").clone()
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Provider for MockProvider {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.issued.lock().expect("issue log").push(Instant::now());
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlightGuard(&self.in_flight);

        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        let text = match identify_probe(&self.battery, &request.user_message) {
            Some((index, word)) => {
                let call = {
                    let mut per_pair = self.per_pair.lock().expect("pair counter");
                    let n = per_pair.entry((word.clone(), index)).or_insert(0);
                    *n += 1;
                    *n - 1
                };
                let prompt_id = &self.battery.templates[index].id;
                self.knowledge.respond(&word, index, prompt_id, call)
            }
            None => GARBLED_TEXT,
        };
        Ok(ProviderResponse::text(text, self.latency))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

/// Builds the JSON body for a chat-completions endpoint.
pub fn chat_body(request: &ProviderRequest) -> serde_json::Value {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = request.system_message.as_deref().filter(|s| !s.is_empty()) {
        messages.push(ChatMessage {
            role: "system",
            content: system,
        });
    }
    messages.push(ChatMessage {
        role: "user",
        content: &request.user_message,
    });
    serde_json::to_value(ChatBody {
        model: &request.model,
        messages,
        temperature: request.temperature,
        max_tokens: request.max_output_tokens,
    })
    .expect("plain fields serialize")
}

/// Client for any endpoint speaking the chat-completions wire format.
pub struct HttpChatProvider {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
}

impl fmt::Debug for HttpChatProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatProvider")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl HttpChatProvider {
    pub fn new(base_url: &str, api_key: impl Into<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::BadRequest(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.into(),
        })
    }

    /// Reads the key from [`API_KEY_ENV`] and the base URL from
    /// [`API_BASE_ENV`] (falling back to [`DEFAULT_API_BASE`]).
    pub fn from_env(base_override: Option<&str>) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ProviderError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let base = base_override
            .map(str::to_string)
            .or_else(|| std::env::var(API_BASE_ENV).ok())
            .unwrap_or_else(|| DEFAULT_API_BASE.to_string());
        Self::new(&base, key, Duration::from_secs(60))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify_status(status: reqwest::StatusCode, body: String) -> ProviderError {
    match status.as_u16() {
        401 | 403 => ProviderError::Auth(format!("{status}")),
        404 => ProviderError::BadModel(body),
        408 => ProviderError::Timeout(body),
        429 => ProviderError::Throttled(body),
        500..=599 => ProviderError::Server(format!("{status}: {body}")),
        _ => ProviderError::BadRequest(format!("{status}: {body}")),
    }
}

#[async_trait]
impl Provider for HttpChatProvider {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        request.validate()?;
        let started = Instant::now();
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&chat_body(request))
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout(e.to_string())
                } else {
                    ProviderError::Network(e.to_string())
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(classify_status(status, body));
        }
        let body: serde_json::Value = response
            .json()
            .await
            .map_err(|e| ProviderError::Server(format!("unreadable response body: {e}")))?;
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| ProviderError::Server("response has no choices[0].message.content".into()))?;
        let mut out = ProviderResponse::text(text, started.elapsed());
        for key in ["id", "model", "system_fingerprint"] {
            if let Some(v) = body.get(key).and_then(serde_json::Value::as_str) {
                out.provider_meta.insert(key.to_string(), v.to_string());
            }
        }
        if let Some(reason) = body.pointer("/choices/0/finish_reason").and_then(|v| v.as_str()) {
            out.provider_meta
                .insert("finish_reason".into(), reason.to_string());
        }
        Ok(out)
    }
}
