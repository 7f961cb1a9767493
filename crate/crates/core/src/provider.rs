//! Chat-completion interface with per-role model bindings.
//!
//! The [`Provider`] is the only component that talks to model endpoints. Two
//! backends ship with the crate: [`ScriptedBackend`], which serves a
//! [`ScriptedTranscript`] with zero network access, and (behind the `http`
//! feature for a real transport) [`http::HttpChatBackend`] for OpenAI-compatible endpoints.
//! [`RecordingBackend`] wraps any backend and captures a transcript that can
//! be replayed later.

pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::AgentRole;

/// Model assignment for one agent role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleBinding {
    pub role: AgentRole,
    pub model_id: String,
    pub endpoint: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl RoleBinding {
    pub fn new(role: AgentRole, model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        let mut params = BTreeMap::new();
        params.insert("temperature".to_string(), serde_json::json!(0.0));
        Self { role, model_id: model_id.into(), endpoint: endpoint.into(), params }
    }

    /// Per-role defaults: Gemini 2.5 Pro for manager and critic, Claude 4
    /// Sonnet for dev and tool creation, all at temperature 0.
    pub fn defaults() -> Vec<RoleBinding> {
        const GEMINI: &str = "https://generativelanguage.googleapis.com/v1beta/openai/chat/completions";
        const ANTHROPIC: &str = "https://api.anthropic.com/v1/chat/completions";
        vec![
            RoleBinding::new(AgentRole::Manager, "gemini-2.5-pro", GEMINI),
            RoleBinding::new(AgentRole::Dev, "claude-sonnet-4", ANTHROPIC),
            RoleBinding::new(AgentRole::Critic, "gemini-2.5-pro", GEMINI),
            RoleBinding::new(AgentRole::ToolCreator, "claude-sonnet-4", ANTHROPIC),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: String,
    pub text: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { speaker: "system".into(), text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { speaker: "user".into(), text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

impl std::ops::AddAssign for TokenCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt += rhs.prompt;
        self.completion += rhs.completion;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub role: AgentRole,
    pub request_messages: Vec<ChatMessage>,
    pub response_text: String,
    pub latency_ms: u64,
    pub token_counts: TokenCounts,
}

/// What a backend hands back for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub tokens: TokenCounts,
    /// Backend-reported latency; when `None` the provider measures wall time.
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, 429s, 5xx.
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
    #[error("scripted sequence violation at entry {index}: expected request matching {expected:?}, got {actual:?}")]
    SequenceViolation { index: usize, expected: String, actual: String },
    #[error("replay miss at entry {index}: no scripted response for request {actual:?}")]
    ReplayMiss { index: usize, actual: String },
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, binding: &RoleBinding, messages: &[ChatMessage]) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no model binding for role {0}")]
    NoBinding(AgentRole),
    #[error("provider failed after {attempts} attempts: {source}")]
    Exhausted { attempts: u32, source: BackendError },
    #[error(transparent)]
    Backend(BackendError),
}

impl ProviderError {
    /// Transient exhaustion may succeed on a later call; everything else won't.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Exhausted { source: BackendError::Transient(_), .. })
    }
}

/// Running token and latency totals for one session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub tokens: TokenCounts,
    pub latency_ms: u64,
}

impl Usage {
    pub fn add(&mut self, exchange: &ChatExchange) {
        self.calls += 1;
        self.tokens += exchange.token_counts;
        self.latency_ms += exchange.latency_ms;
    }
}

/// Role-bound chat completion with bounded exponential-backoff retries.
#[derive(Clone)]
pub struct Provider {
    bindings: HashMap<AgentRole, RoleBinding>,
    backend: Arc<dyn ChatBackend>,
    max_retries: u32,
    base_backoff: Duration,
}

impl fmt::Debug for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Provider")
            .field("bindings", &self.bindings)
            .field("max_retries", &self.max_retries)
            .finish_non_exhaustive()
    }
}

impl Provider {
    pub fn new(bindings: Vec<RoleBinding>, backend: Arc<dyn ChatBackend>) -> Self {
        let bindings = bindings.into_iter().map(|b| (b.role, b)).collect();
        Self { bindings, backend, max_retries: 3, base_backoff: Duration::from_millis(200) }
    }

    /// Scripted provider with the default bindings; the usual test setup.
    pub fn scripted(transcript: ScriptedTranscript) -> Self {
        Self::new(RoleBinding::defaults(), Arc::new(ScriptedBackend::new(transcript)))
    }

    pub fn with_retries(mut self, max_retries: u32, base_backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.base_backoff = base_backoff;
        self
    }

    pub fn binding(&self, role: AgentRole) -> Option<&RoleBinding> {
        self.bindings.get(&role)
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn complete(&self, role: AgentRole, messages: Vec<ChatMessage>) -> Result<ChatExchange, ProviderError> {
        let binding = self.bindings.get(&role).ok_or(ProviderError::NoBinding(role))?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            match self.backend.send(binding, &messages) {
                Ok(reply) => {
                    let latency_ms = reply.latency_ms.unwrap_or_else(|| started.elapsed().as_millis() as u64);
                    return Ok(ChatExchange {
                        role,
                        request_messages: messages,
                        response_text: reply.text,
                        latency_ms,
                        token_counts: reply.tokens,
                    });
                }
                Err(BackendError::Transient(msg)) => {
                    if attempt > self.max_retries {
                        return Err(ProviderError::Exhausted { attempts: attempt, source: BackendError::Transient(msg) });
                    }
                    std::thread::sleep(self.base_backoff * 2u32.saturating_pow(attempt - 1));
                }
                Err(other) => return Err(ProviderError::Backend(other)),
            }
        }
    }
}

/// Collapse runs of whitespace to single spaces and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn request_text(messages: &[ChatMessage]) -> String {
    normalize_whitespace(&messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMode {
    #[default]
    StrictSequence,
    PatternMatch,
}

/// One scripted response. `matcher` is a whitespace-normalized substring of
/// the request text; an empty matcher matches anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<AgentRole>,
    pub matcher: String,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(role: AgentRole, matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self { role: Some(role), matcher: matcher.into(), response: response.into() }
    }

    fn matches(&self, role: AgentRole, request: &str) -> bool {
        self.role.is_none_or(|r| r == role) && request.contains(&normalize_whitespace(&self.matcher))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedTranscript {
    pub mode: ScriptMode,
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ScriptedTranscript {
    pub fn strict(entries: Vec<ScriptEntry>) -> Self {
        Self { mode: ScriptMode::StrictSequence, entries }
    }

    pub fn pattern(entries: Vec<ScriptEntry>) -> Self {
        Self { mode: ScriptMode::PatternMatch, entries }
    }

    /// Line-delimited JSON, one exchange per line.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path, mode: ScriptMode) -> Result<Self, TranscriptError> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry =
                serde_json::from_str(&line).map_err(|e| TranscriptError::Parse { line: i + 1, message: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self { mode, entries })
    }
}

/// Serves responses from a [`ScriptedTranscript`]; never touches the network.
#[derive(Debug)]
pub struct ScriptedBackend {
    transcript: ScriptedTranscript,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(transcript: ScriptedTranscript) -> Self {
        Self { transcript, cursor: Mutex::new(0) }
    }

    /// Entries not yet consumed in strict mode (always empty in pattern mode).
    pub fn leftover(&self) -> Vec<ScriptEntry> {
        match self.transcript.mode {
            ScriptMode::StrictSequence => {
                let cursor = *self.cursor.lock().unwrap();
                self.transcript.entries[cursor..].to_vec()
            }
            ScriptMode::PatternMatch => Vec::new(),
        }
    }

    /// Fails if a strict transcript was not fully consumed.
    pub fn finish(&self) -> Result<(), BackendError> {
        match self.leftover().first() {
            None => Ok(()),
            Some(e) => Err(BackendError::Fatal(format!(
                "{} scripted entries left unconsumed, next matcher {:?}",
                self.leftover().len(),
                e.matcher
            ))),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, binding: &RoleBinding, messages: &[ChatMessage]) -> Result<BackendReply, BackendError> {
        let request = request_text(messages);
        let tokens = TokenCounts { prompt: request.split(' ').count() as u64, completion: 0 };
        let reply = |text: &str| BackendReply {
            tokens: TokenCounts { completion: text.split_whitespace().count() as u64, ..tokens },
            text: text.to_string(),
            latency_ms: Some(0),
        };
        match self.transcript.mode {
            ScriptMode::StrictSequence => {
                let mut cursor = self.cursor.lock().unwrap();
                let Some(entry) = self.transcript.entries.get(*cursor) else {
                    return Err(BackendError::ReplayMiss { index: *cursor, actual: request });
                };
                if !entry.matches(binding.role, &request) {
                    return Err(BackendError::SequenceViolation {
                        index: *cursor,
                        expected: format!("{}{}", entry.role.map(|r| format!("[{r}] ")).unwrap_or_default(), entry.matcher),
                        actual: format!("[{}] {}", binding.role, request),
                    });
                }
                *cursor += 1;
                Ok(reply(&entry.response))
            }
            ScriptMode::PatternMatch => self
                .transcript
                .entries
                .iter()
                .find(|e| e.matches(binding.role, &request))
                .map(|e| reply(&e.response))
                .ok_or(BackendError::ReplayMiss { index: 0, actual: request }),
        }
    }
}

/// Wraps a live backend and captures every exchange as a strict transcript entry.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    captured: Mutex<Vec<ScriptEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self { inner, captured: Mutex::new(Vec::new()) }
    }

    pub fn transcript(&self) -> ScriptedTranscript {
        ScriptedTranscript::strict(self.captured.lock().unwrap().clone())
    }
}

impl ChatBackend for RecordingBackend {
    fn send(&self, binding: &RoleBinding, messages: &[ChatMessage]) -> Result<BackendReply, BackendError> {
        let reply = self.inner.send(binding, messages)?;
        self.captured.lock().unwrap().push(ScriptEntry {
            role: Some(binding.role),
            matcher: request_text(messages),
            response: reply.text.clone(),
        });
        Ok(reply)
    }
}
