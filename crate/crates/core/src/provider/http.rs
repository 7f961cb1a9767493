//! OpenAI-compatible chat-completion backend over a pluggable JSON transport.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use super::{BackendError, BackendReply, ChatBackend, ChatMessage, RoleBinding, TokenCounts};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Connection failures, timeouts, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

/// Minimal JSON-over-HTTP POST. Implementations own all network access.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, headers: &BTreeMap<String, String>, body: &Value) -> Result<Value, TransportError>;
}

/// Counts calls before delegating; used to prove replay stays offline.
pub struct CountingTransport {
    inner: Arc<dyn HttpTransport>,
    calls: AtomicU64,
}

impl CountingTransport {
    pub fn new(inner: Arc<dyn HttpTransport>) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl HttpTransport for CountingTransport {
    fn post_json(&self, url: &str, headers: &BTreeMap<String, String>, body: &Value) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, headers, body)
    }
}

/// Sends `{model, messages, temperature, max_tokens}` and reads
/// `choices[0].message.content` plus `usage`.
///
/// The API key is read from the environment variable named by the binding's
/// `api_key_env` param (default `EVOFLOW_API_KEY`) at call time and sent as a
/// bearer token. It is never stored.
pub struct HttpChatBackend {
    transport: Arc<dyn HttpTransport>,
}

impl HttpChatBackend {
    pub fn new(transport: Arc<dyn HttpTransport>) -> Self {
        Self { transport }
    }

    fn request_body(binding: &RoleBinding, messages: &[ChatMessage]) -> Value {
        let msgs: Vec<Value> = messages
            .iter()
            .map(|m| json!({"role": if m.speaker == "system" { "system" } else { "user" }, "content": m.text}))
            .collect();
        let mut body = json!({"model": binding.model_id, "messages": msgs, "temperature": 0.0});
        for (k, v) in &binding.params {
            if k != "api_key_env" {
                body[k] = v.clone();
            }
        }
        body
    }
}

impl ChatBackend for HttpChatBackend {
    fn send(&self, binding: &RoleBinding, messages: &[ChatMessage]) -> Result<BackendReply, BackendError> {
        let key_var = binding.params.get("api_key_env").and_then(Value::as_str).unwrap_or("EVOFLOW_API_KEY");
        let mut headers = BTreeMap::new();
        if let Ok(key) = std::env::var(key_var) {
            headers.insert("authorization".to_string(), format!("Bearer {key}"));
        }
        let body = Self::request_body(binding, messages);
        let resp = self.transport.post_json(&binding.endpoint, &headers, &body).map_err(|e| match e {
            TransportError::Transient(m) => BackendError::Transient(m),
            TransportError::Fatal(m) => BackendError::Fatal(m),
        })?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Fatal(format!("response missing choices[0].message.content: {resp}")))?;
        let tokens = TokenCounts {
            prompt: resp.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion: resp.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        };
        Ok(BackendReply { text: text.to_string(), tokens, latency_ms: None })
    }
}

#[cfg(feature = "http")]
pub use reqwest_transport::ReqwestTransport;

#[cfg(feature = "http")]
mod reqwest_transport {
    use std::collections::BTreeMap;
    use std::time::Duration;

    use serde_json::Value;

    use super::{HttpTransport, TransportError};

    pub struct ReqwestTransport {
        client: reqwest::blocking::Client,
    }

    impl ReqwestTransport {
        pub fn new(timeout: Duration) -> Result<Self, reqwest::Error> {
            Ok(Self { client: reqwest::blocking::Client::builder().timeout(timeout).build()? })
        }
    }

    impl HttpTransport for ReqwestTransport {
        fn post_json(&self, url: &str, headers: &BTreeMap<String, String>, body: &Value) -> Result<Value, TransportError> {
            let mut req = self.client.post(url).json(body);
            for (k, v) in headers {
                req = req.header(k, v);
            }
            let resp = req.send().map_err(|e| {
                if e.is_timeout() || e.is_connect() {
                    TransportError::Transient(e.to_string())
                } else {
                    TransportError::Fatal(e.to_string())
                }
            })?;
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                return Err(TransportError::Transient(format!("HTTP {status}")));
            }
            if !status.is_success() {
                return Err(TransportError::Fatal(format!("HTTP {status}")));
            }
            resp.json().map_err(|e| TransportError::Fatal(e.to_string()))
        }
    }
}
