//! OpenAI-style chat-completions backend with retry and transcript logging.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CallCounter, ModelBackend, ModelRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub name: String,
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Providers without presence/frequency penalties get them omitted.
    pub supports_penalties: bool,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            name: "task".into(),
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "SEGOPT_TASK_API_KEY".into(),
            supports_penalties: true,
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
            timeout_secs: 120,
        }
    }
}

/// Failure of a single HTTP exchange, before retry classification.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Connection reset, DNS failure, timeout.
    Network(String),
}

pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<HttpResponse, TransportError> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .send_json(body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Append-only JSONL log of every request attempt and its outcome.
pub struct TranscriptLog {
    file: Mutex<File>,
}

impl TranscriptLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn append(&self, entry: &Value) {
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{entry}") {
            log::warn!("transcript write failed: {e}");
        }
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct ChatBackend {
    config: RemoteConfig,
    api_key: String,
    transport: Arc<dyn Transport>,
    transcript: Option<Arc<TranscriptLog>>,
    sleep: Sleeper,
    counter: CallCounter,
    attempts: AtomicU64,
}

impl ChatBackend {
    /// Reads the API key from `config.api_key_env`.
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| BackendError::MissingCredentials {
            var: config.api_key_env.clone(),
        })?;
        Ok(Self::with_key(config, api_key, transport))
    }

    pub fn with_key(config: RemoteConfig, api_key: String, transport: Arc<dyn Transport>) -> Self {
        if !config.supports_penalties {
            log::info!(
                "{}: presence/frequency penalties unsupported, omitted from requests",
                config.name
            );
        }
        Self {
            config,
            api_key,
            transport,
            transcript: None,
            sleep: Box::new(std::thread::sleep),
            counter: CallCounter::default(),
            attempts: AtomicU64::new(0),
        }
    }

    pub fn with_transcript(mut self, transcript: Arc<TranscriptLog>) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn request_body(&self, request: &ModelRequest) -> Value {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        let user_content = if request.image_payloads.is_empty() {
            json!(request.user_input)
        } else {
            let mut parts = vec![json!({"type": "text", "text": request.user_input})];
            for img in &request.image_payloads {
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{};base64,{}", img.media_type, img.data)},
                }));
            }
            Value::Array(parts)
        };
        messages.push(json!({"role": "user", "content": user_content}));
        let p = &request.params;
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_tokens,
        });
        if self.config.supports_penalties {
            body["presence_penalty"] = json!(p.presence_penalty);
            body["frequency_penalty"] = json!(p.frequency_penalty);
        }
        body
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt - 1).min(20);
        Duration::from_millis(self.config.base_delay_ms.saturating_mul(factor).min(self.config.max_delay_ms))
    }

    fn record(&self, attempt: u32, request: &ModelRequest, outcome: Value) {
        if let Some(t) = &self.transcript {
            t.append(&json!({
                "backend": self.config.name,
                "attempt": attempt,
                "system_prompt": request.system_prompt,
                "user_input": request.user_input,
                "images": request.image_payloads.len(),
                "outcome": outcome,
            }));
        }
    }

    fn extract(&self, body: &str) -> Result<String, BackendError> {
        let schema = |message: String| BackendError::Schema {
            backend: self.config.name.clone(),
            message,
        };
        let v: Value = serde_json::from_str(body).map_err(|e| schema(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| schema("missing choices[0].message.content".into()))
    }
}

fn transient(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl ModelBackend for ChatBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }

    fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.request_body(request);
        let max_attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.transport.post_json(&url, &self.api_key, &body) {
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    self.record(attempt, request, json!({"status": resp.status, "error": "auth"}));
                    return Err(BackendError::Auth {
                        backend: self.config.name.clone(),
                        message: resp.body,
                    });
                }
                Ok(resp) if (200..300).contains(&resp.status) => {
                    self.record(attempt, request, json!({"status": resp.status, "body": resp.body}));
                    return self.extract(&resp.body);
                }
                Ok(resp) if transient(resp.status) => {
                    self.record(attempt, request, json!({"status": resp.status, "body": resp.body}));
                    last = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    self.record(attempt, request, json!({"status": resp.status, "body": resp.body}));
                    return Err(BackendError::Http {
                        backend: self.config.name.clone(),
                        status: resp.status,
                        body: resp.body,
                    });
                }
                Err(TransportError::Network(msg)) => {
                    self.record(attempt, request, json!({"error": msg}));
                    last = msg;
                }
            }
            if attempt < max_attempts {
                log::warn!("{}: attempt {attempt} failed ({last}), retrying", self.config.name);
                (self.sleep)(self.backoff(attempt));
            }
        }
        Err(BackendError::RetryExhausted {
            backend: self.config.name.clone(),
            attempts: max_attempts,
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{GenerationParams, ImagePayload};
    use std::collections::VecDeque;

    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        seen: Mutex<Vec<Value>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies.into()),
                seen: Mutex::new(Vec::new()),
            })
        }
    }

    impl Transport for Scripted {
        fn post_json(&self, _url: &str, _key: &str, body: &Value) -> Result<HttpResponse, TransportError> {
            self.seen.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().pop_front().expect("script exhausted")
        }
    }

    fn ok(text: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        })
    }

    fn status(code: u16) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: code,
            body: "{}".into(),
        })
    }

    fn backend(transport: Arc<Scripted>) -> ChatBackend {
        ChatBackend::with_key(RemoteConfig::default(), "k".into(), transport).with_sleeper(|_| {})
    }

    fn req() -> ModelRequest {
        ModelRequest::text("sys", "hi", GenerationParams::default())
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("transcript.jsonl");
        let t = Scripted::new(vec![Err(TransportError::Network("reset".into())), status(503), ok("done")]);
        let b = backend(t).with_transcript(Arc::new(TranscriptLog::open(&log_path).unwrap()));
        assert_eq!(b.complete(&req()).unwrap(), "done");
        assert_eq!(b.attempts(), 3);
        assert_eq!(b.calls(), 1);
        let lines: Vec<Value> = std::fs::read_to_string(&log_path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let attempts: Vec<u64> = lines.iter().map(|l| l["attempt"].as_u64().unwrap()).collect();
        assert_eq!(attempts, [1, 2, 3]);
    }

    #[test]
    fn gives_up_after_attempt_cap() {
        let t = Scripted::new(vec![status(500), status(502), status(429), status(500)]);
        let b = backend(t);
        assert!(matches!(
            b.complete(&req()),
            Err(BackendError::RetryExhausted { attempts: 4, .. })
        ));
        assert_eq!(b.calls(), 1);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let t = Scripted::new(vec![status(401)]);
        let b = backend(t);
        assert!(matches!(b.complete(&req()), Err(BackendError::Auth { .. })));
        assert_eq!(b.attempts(), 1);
    }

    #[test]
    fn unrecognized_response() {
        let t = Scripted::new(vec![Ok(HttpResponse {
            status: 200,
            body: r#"{"output": "x"}"#.into(),
        })]);
        assert!(matches!(backend(t).complete(&req()), Err(BackendError::Schema { .. })));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = backend(Scripted::new(vec![]));
        let ms: Vec<u128> = (1..=6).map(|a| b.backoff(a).as_millis()).collect();
        assert_eq!(ms, [500, 1000, 2000, 4000, 8000, 8000]);
    }

    #[test]
    fn wire_format_with_images_and_penalties() {
        let t = Scripted::new(vec![ok("x")]);
        let b = backend(t.clone());
        let mut r = req();
        r.image_payloads.push(ImagePayload {
            media_type: "image/png".into(),
            data: "AQID".into(),
        });
        b.complete(&r).unwrap();
        let body = &t.seen.lock().unwrap()[0];
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][0]["text"], "hi");
        assert_eq!(
            body["messages"][1]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["presence_penalty"], 0.0);
        assert_eq!(body["max_tokens"], 2048);
    }

    #[test]
    fn unsupported_penalties_omitted() {
        let cfg = RemoteConfig {
            supports_penalties: false,
            ..Default::default()
        };
        let b = ChatBackend::with_key(cfg, "k".into(), Scripted::new(vec![]));
        let body = b.request_body(&req());
        assert!(body.get("presence_penalty").is_none());
        assert!(body.get("frequency_penalty").is_none());
        assert_eq!(body["messages"][1]["content"], "hi");
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = RemoteConfig {
            api_key_env: "SEGOPT_TEST_UNSET_KEY_VAR".into(),
            ..Default::default()
        };
        assert!(matches!(
            ChatBackend::new(cfg, Scripted::new(vec![])),
            Err(BackendError::MissingCredentials { .. })
        ));
    }
}
