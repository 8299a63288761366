//! Text generation backends.
//!
//! Each pipeline stage targets one of three LoRA adapters. On an
//! OpenAI-compatible server that hosts several adapters over one base model,
//! an adapter is selected by sending its served model name, so a
//! [`BackendProfile`] is just an endpoint plus an adapter → model-name map.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterId {
    ToolCall,
    DialogueWithResults,
    DialogueWithoutResults,
}

impl AdapterId {
    pub const ALL: [AdapterId; 3] = [
        AdapterId::ToolCall,
        AdapterId::DialogueWithResults,
        AdapterId::DialogueWithoutResults,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterId::ToolCall => "tool_call",
            AdapterId::DialogueWithResults => "dialogue_with_results",
            AdapterId::DialogueWithoutResults => "dialogue_without_results",
        }
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    /// Sampling used when regenerating dialogue data.
    pub const SYNTHESIS: GenerationParams = GenerationParams {
        temperature: 0.1,
        top_p: 0.95,
        max_tokens: 256,
        seed: None,
    };

    /// Greedy decoding for live pipeline turns.
    pub const GREEDY: GenerationParams = GenerationParams {
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: 256,
        seed: None,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be > 0".into());
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::GREEDY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system: String,
    pub user: String,
    pub adapter: AdapterId,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendErrorKind {
    Transport { message: String },
    Http { status: u16, body: String },
    Timeout,
    MalformedResponse { message: String },
    InvalidRequest { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("backend error for adapter {adapter}: {kind}")]
pub struct BackendError {
    pub adapter: AdapterId,
    pub kind: BackendErrorKind,
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendErrorKind::Transport { message } => write!(f, "transport failure: {message}"),
            BackendErrorKind::Http { status, body } => write!(f, "HTTP {status}: {body}"),
            BackendErrorKind::Timeout => f.write_str("request timed out"),
            BackendErrorKind::MalformedResponse { message } => write!(f, "malformed response: {message}"),
            BackendErrorKind::InvalidRequest { message } => write!(f, "invalid request: {message}"),
        }
    }
}

/// Anything that can turn a (system, user) prompt pair into text.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Name recorded as provenance for generated data.
    fn model_name(&self, adapter: AdapterId) -> String;
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn model_name(&self, adapter: AdapterId) -> String {
        (**self).model_name(adapter)
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("adapter {0} has no model name in the backend profile")]
    UnmappedAdapter(AdapterId),
    #[error("failed to read backend config {path}: {message}")]
    Read { path: String, message: String },
    #[error("failed to build HTTP client: {0}")]
    Client(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct BackendProfile {
    pub endpoint_url: String,
    adapter_model_names: BTreeMap<AdapterId, String>,
    pub request_timeout: Duration,
    pub auth_token: Option<String>,
}

impl fmt::Debug for BackendProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendProfile")
            .field("endpoint_url", &self.endpoint_url)
            .field("adapter_model_names", &self.adapter_model_names)
            .field("request_timeout", &self.request_timeout)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl BackendProfile {
    pub fn new(
        endpoint_url: impl Into<String>,
        adapter_model_names: BTreeMap<AdapterId, String>,
        request_timeout: Duration,
        auth_token: Option<String>,
    ) -> Result<Self, ProfileError> {
        for adapter in AdapterId::ALL {
            if !adapter_model_names.get(&adapter).is_some_and(|name| !name.is_empty()) {
                return Err(ProfileError::UnmappedAdapter(adapter));
            }
        }
        Ok(Self {
            endpoint_url: endpoint_url.into(),
            adapter_model_names,
            request_timeout,
            auth_token,
        })
    }

    pub fn model_for(&self, adapter: AdapterId) -> &str {
        &self.adapter_model_names[&adapter]
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// JSON body sent for one generation request.
pub fn chat_completion_body(profile: &BackendProfile, request: &GenerationRequest) -> Value {
    serde_json::to_value(ChatCompletionRequest {
        model: profile.model_for(request.adapter),
        messages: [
            ChatMessage {
                role: "system",
                content: &request.system,
            },
            ChatMessage {
                role: "user",
                content: &request.user,
            },
        ],
        temperature: request.params.temperature,
        top_p: request.params.top_p,
        max_tokens: request.params.max_tokens,
        seed: request.params.seed,
    })
    .expect("chat request serializes")
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn extract_content(body: &Value) -> Result<String, String> {
    body.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| "missing choices[0].message.content".to_string())
}

/// Blocking client for `POST {endpoint}/v1/chat/completions`.
pub struct OpenAiBackend {
    profile: BackendProfile,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(profile: BackendProfile) -> Result<Self, ProfileError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(profile.request_timeout)
            .build()
            .map_err(|e| ProfileError::Client(e.to_string()))?;
        Ok(Self { profile, client })
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn send_once(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let fail = |kind| BackendError {
            adapter: request.adapter,
            kind,
        };
        let mut http = self
            .client
            .post(self.profile.completions_url())
            .json(&chat_completion_body(&self.profile, request));
        if let Some(token) = &self.profile.auth_token {
            http = http.bearer_auth(token);
        }
        let response = http.send().map_err(|e| fail(classify_reqwest(&e)))?;
        let status = response.status();
        let text = response.text().map_err(|e| fail(classify_reqwest(&e)))?;
        if !status.is_success() {
            return Err(fail(BackendErrorKind::Http {
                status: status.as_u16(),
                body: text,
            }));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| {
            fail(BackendErrorKind::MalformedResponse {
                message: e.to_string(),
            })
        })?;
        extract_content(&body).map_err(|message| fail(BackendErrorKind::MalformedResponse { message }))
    }
}

fn classify_reqwest(err: &reqwest::Error) -> BackendErrorKind {
    if err.is_timeout() {
        BackendErrorKind::Timeout
    } else {
        BackendErrorKind::Transport {
            message: err.to_string(),
        }
    }
}

impl Generator for OpenAiBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        if let Err(message) = request.params.validate() {
            return Err(BackendError {
                adapter: request.adapter,
                kind: BackendErrorKind::InvalidRequest { message },
            });
        }
        // one retry on transport failure only; timeouts already used the budget
        match self.send_once(request) {
            Err(BackendError {
                kind: BackendErrorKind::Transport { .. },
                ..
            }) => self.send_once(request),
            other => other,
        }
    }

    fn model_name(&self, adapter: AdapterId) -> String {
        self.profile.model_for(adapter).to_string()
    }
}

/// How a mock rule chooses which requests it answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Always,
    /// Substring of the user prompt.
    UserContains(String),
    /// Substring of the current player query (text after the last
    /// `user query:` line).
    QueryContains(String),
}

impl Matcher {
    fn matches(&self, request: &GenerationRequest) -> bool {
        match self {
            Matcher::Always => true,
            Matcher::UserContains(needle) => request.user.contains(needle.as_str()),
            Matcher::QueryContains(needle) => current_query(&request.user).contains(needle.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Text(String),
    /// Text with `{query}` replaced by the current player query.
    Template(String),
    Fail(MockFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transport,
    Timeout,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterId>,
    #[serde(rename = "match", default = "always")]
    pub matcher: Matcher,
    pub reply: Reply,
}

fn always() -> Matcher {
    Matcher::Always
}

/// Canned replies. The first matching rule wins, then the per-adapter
/// fallback, then the empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: BTreeMap<AdapterId, String>,
    /// Artificial latency per request, in milliseconds.
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn rule(mut self, adapter: Option<AdapterId>, matcher: Matcher, reply: Reply) -> Self {
        self.rules.push(MockRule {
            adapter,
            matcher,
            reply,
        });
        self
    }

    pub fn always(self, adapter: AdapterId, text: impl Into<String>) -> Self {
        self.rule(Some(adapter), Matcher::Always, Reply::Text(text.into()))
    }

    pub fn fallback(mut self, adapter: AdapterId, text: impl Into<String>) -> Self {
        self.fallback.insert(adapter, text.into());
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency_ms = latency.as_millis() as u64;
        self
    }
}

/// Deterministic scripted generator that records every request.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<GenerationRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    pub fn clear(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    pub fn reply_for(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let rule = self.script.rules.iter().find(|rule| {
            rule.adapter.is_none_or(|a| a == request.adapter) && rule.matcher.matches(request)
        });
        let fail = |kind| BackendError {
            adapter: request.adapter,
            kind,
        };
        match rule.map(|r| &r.reply) {
            Some(Reply::Text(text)) => Ok(text.clone()),
            Some(Reply::Template(template)) => Ok(template.replace("{query}", current_query(&request.user))),
            Some(Reply::Fail(MockFailure::Transport)) => Err(fail(BackendErrorKind::Transport {
                message: "scripted transport failure".into(),
            })),
            Some(Reply::Fail(MockFailure::Timeout)) => Err(fail(BackendErrorKind::Timeout)),
            Some(Reply::Fail(MockFailure::Http)) => Err(fail(BackendErrorKind::Http {
                status: 500,
                body: "scripted server error".into(),
            })),
            None => Ok(self.script.fallback.get(&request.adapter).cloned().unwrap_or_default()),
        }
    }
}

impl Generator for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.log.lock().expect("mock log poisoned").push(request.clone());
        if self.script.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        self.reply_for(request)
    }

    fn model_name(&self, adapter: AdapterId) -> String {
        format!("mock/{adapter}")
    }
}

/// The current player query inside a rendered user prompt.
pub fn current_query(user_prompt: &str) -> &str {
    const MARKER: &str = "user query:\n";
    user_prompt
        .rfind(MARKER)
        .map_or(user_prompt, |at| &user_prompt[at + MARKER.len()..])
}

/// Backend selection file.
///
/// ```json
/// {"kind": "openai", "endpoint_url": "http://localhost:8000",
///  "adapter_models": {"tool_call": "tc", "dialogue_with_results": "wr",
///                     "dialogue_without_results": "wo"},
///  "request_timeout_ms": 7000, "auth_token_env": "NPC_BACKEND_TOKEN"}
/// ```
///
/// or `{"kind": "mock", "script": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Openai {
        endpoint_url: String,
        adapter_models: BTreeMap<AdapterId, String>,
        #[serde(default = "default_timeout_ms")]
        request_timeout_ms: u64,
        #[serde(default = "default_token_env")]
        auth_token_env: String,
    },
    Mock {
        #[serde(default)]
        script: MockScript,
    },
}

fn default_timeout_ms() -> u64 {
    7_000
}

fn default_token_env() -> String {
    "NPC_BACKEND_TOKEN".into()
}

pub enum BuiltBackend {
    OpenAi(Arc<OpenAiBackend>),
    Mock(Arc<MockBackend>),
}

impl BuiltBackend {
    pub fn generator(&self) -> Arc<dyn Generator> {
        match self {
            BuiltBackend::OpenAi(b) => b.clone(),
            BuiltBackend::Mock(b) => b.clone(),
        }
    }
}

impl BackendConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let read_err = |message: String| ProfileError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))
    }

    /// Builds the generator; the auth token is read from the environment.
    pub fn build(&self) -> Result<BuiltBackend, ProfileError> {
        match self {
            BackendConfig::Openai {
                endpoint_url,
                adapter_models,
                request_timeout_ms,
                auth_token_env,
            } => {
                let profile = BackendProfile::new(
                    endpoint_url.clone(),
                    adapter_models.clone(),
                    Duration::from_millis(*request_timeout_ms),
                    std::env::var(auth_token_env).ok().filter(|t| !t.is_empty()),
                )?;
                Ok(BuiltBackend::OpenAi(Arc::new(OpenAiBackend::new(profile)?)))
            }
            BackendConfig::Mock { script } => Ok(BuiltBackend::Mock(Arc::new(MockBackend::new(script.clone())))),
        }
    }
}
