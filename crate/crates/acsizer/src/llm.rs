//! Provider-agnostic chat-completion client with tool calling.
//!
//! One [`Client`] speaks either of two wire dialects (chosen by config,
//! never sniffed), retries rate limits and transient server errors with
//! capped exponential backoff, accounts token usage per call, and can wrap
//! its transport in a recorder or a replayer so optimization runs are
//! reproducible without network access. Credentials are resolved from an
//! environment variable at call time and never written to config files,
//! logs, or transcripts.

use std::collections::VecDeque;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::agent::{
    EngineDescriptor, EngineFailure, ProposalContext, ProposalEngine, PromptBundle,
};
use crate::netlist::{ParamPatch, PatchAssignment, PhysicalValue, TunableKind};
use crate::sim::plan_analyses;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("transport failed: {detail}")]
    TransportError { detail: String, retryable: bool },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("replay mismatch: recorded request {expected} but got {actual}")]
    ReplayMismatch { expected: String, actual: String },
    #[error("replay transcript exhausted")]
    ReplayExhausted,
    #[error("transcript io: {0}")]
    TranscriptIo(#[from] std::io::Error),
    #[error("transcript line {line} is not a valid entry: {detail}")]
    TranscriptParse { line: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// A structured tool invocation returned by the model. `arguments` is the
/// parsed JSON value; when a provider returns unparseable argument text it
/// is preserved as a JSON string so a repair round-trip can quote it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    pub arguments: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    /// For `Role::Tool` messages: the id of the call being answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn tool_result(call_id: impl Into<String>, content: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }
}

/// A callable function exposed to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    /// JSON schema of the arguments object.
    pub parameters: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// `messages` + `tool_calls` with stringified arguments; bearer auth.
    OpenaiStyle,
    /// Top-level `system`, content blocks, `tool_use`/`tool_result`;
    /// `x-api-key` auth plus a version header.
    AnthropicStyle,
}

fn default_max_retries() -> u32 {
    3
}
fn default_timeout_s() -> f64 {
    60.0
}
fn default_backoff_base_s() -> f64 {
    0.5
}
fn default_backoff_cap_s() -> f64 {
    30.0
}
fn default_max_tokens() -> u32 {
    4096
}

/// Everything needed to reach one provider. The API key itself is never a
/// config value — only the name of the environment variable holding it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub dialect: Dialect,
    pub endpoint: String,
    pub model_id: String,
    pub api_key_env: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    /// Requests per minute admitted; 0 disables the limiter.
    #[serde(default)]
    pub rate_limit_per_min: u32,
    #[serde(default = "default_backoff_base_s")]
    pub backoff_base_s: f64,
    /// Cap on the TOTAL time spent waiting between retries of one call.
    #[serde(default = "default_backoff_cap_s")]
    pub backoff_cap_s: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

/// One outbound HTTP request, fully assembled.
#[derive(Clone, Debug)]
pub struct WireRequest {
    pub endpoint: String,
    pub body: Value,
    /// Header name/value pairs. Never recorded to transcripts.
    pub headers: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct WireResponse {
    pub status: u16,
    pub body: Value,
}

/// The seam between the client and the network. Implementations: live HTTP,
/// a recorder wrapping another transport, an offline replayer, and test
/// mocks.
pub trait Transport {
    fn send(&mut self, request: &WireRequest) -> Result<WireResponse, LlmError>;
    /// Whether a credential must be resolved before calling `send`. Offline
    /// transports return false so replay needs no secrets at all.
    fn requires_auth(&self) -> bool;
}

/// Live HTTPS transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<HttpTransport, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::TransportError {
                detail: format!("building http client: {e}"),
                retryable: false,
            })?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, request: &WireRequest) -> Result<WireResponse, LlmError> {
        let mut req = self.client.post(&request.endpoint).json(&request.body);
        for (name, value) in &request.headers {
            req = req.header(name, value);
        }
        let resp = req.send().map_err(|e| LlmError::TransportError {
            detail: format!("request to {} failed: {e}", request.endpoint),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status().as_u16();
        let body: Value = resp.json().unwrap_or(Value::Null);
        Ok(WireResponse { status, body })
    }

    fn requires_auth(&self) -> bool {
        true
    }
}

/// Canonical request fingerprint: sha256 of the serialized body. The
/// serializer emits object keys in sorted order, so semantically equal
/// bodies hash equally.
pub fn request_hash(body: &Value) -> String {
    let text = serde_json::to_string(body).expect("json bodies serialize");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// One request/response pair of a recorded session. Headers (and thus
/// credentials) are deliberately absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_sha256: String,
    pub request: Value,
    pub status: u16,
    pub response: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for TranscriptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(TranscriptMode::Live),
            "record" => Ok(TranscriptMode::Record),
            "replay" => Ok(TranscriptMode::Replay),
            other => Err(format!(
                "unknown transcript mode '{other}' (expected live, record, or replay)"
            )),
        }
    }
}

/// Forwards to an inner transport and appends every exchange to a JSONL
/// transcript, flushing after each entry.
pub struct RecordingTransport {
    inner: Box<dyn Transport>,
    file: File,
}

impl RecordingTransport {
    pub fn create(inner: Box<dyn Transport>, path: &Path) -> Result<RecordingTransport, LlmError> {
        Ok(RecordingTransport {
            inner,
            file: File::create(path)?,
        })
    }
}

impl Transport for RecordingTransport {
    fn send(&mut self, request: &WireRequest) -> Result<WireResponse, LlmError> {
        let response = self.inner.send(request)?;
        let entry = TranscriptEntry {
            request_sha256: request_hash(&request.body),
            request: request.body.clone(),
            status: response.status,
            response: response.body.clone(),
        };
        writeln!(
            self.file,
            "{}",
            serde_json::to_string(&entry).expect("entries serialize")
        )?;
        self.file.flush()?;
        Ok(response)
    }

    fn requires_auth(&self) -> bool {
        self.inner.requires_auth()
    }
}

/// Serves a recorded transcript in order with request-hash verification.
/// Makes no network access and needs no credentials.
pub struct ReplayTransport {
    entries: VecDeque<TranscriptEntry>,
}

impl ReplayTransport {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> ReplayTransport {
        ReplayTransport {
            entries: entries.into(),
        }
    }

    pub fn load(path: &Path) -> Result<ReplayTransport, LlmError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| LlmError::TranscriptParse {
                    line: i + 1,
                    detail: e.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(ReplayTransport::from_entries(entries))
    }
}

impl Transport for ReplayTransport {
    fn send(&mut self, request: &WireRequest) -> Result<WireResponse, LlmError> {
        let Some(entry) = self.entries.pop_front() else {
            return Err(LlmError::ReplayExhausted);
        };
        let actual = request_hash(&request.body);
        if actual != entry.request_sha256 {
            return Err(LlmError::ReplayMismatch {
                expected: entry.request_sha256,
                actual,
            });
        }
        Ok(WireResponse {
            status: entry.status,
            body: entry.response,
        })
    }

    fn requires_auth(&self) -> bool {
        false
    }
}

/// Running totals across one client's calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub retries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

struct RateLimiter {
    per_min: u32,
    stamps: VecDeque<Instant>,
}

impl RateLimiter {
    fn new(per_min: u32) -> RateLimiter {
        RateLimiter {
            per_min,
            stamps: VecDeque::new(),
        }
    }

    fn admit(&mut self) {
        if self.per_min == 0 {
            return;
        }
        let window = Duration::from_secs(60);
        loop {
            let now = Instant::now();
            while let Some(front) = self.stamps.front() {
                if now.duration_since(*front) >= window {
                    self.stamps.pop_front();
                } else {
                    break;
                }
            }
            if (self.stamps.len() as u32) < self.per_min {
                self.stamps.push_back(now);
                return;
            }
            let oldest = *self.stamps.front().expect("non-empty when full");
            std::thread::sleep(window.saturating_sub(now.duration_since(oldest)));
        }
    }
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    }
}

fn encode_openai(cfg: &ProviderConfig, messages: &[ChatMessage], tools: &[ToolSchema]) -> Value {
    let msgs: Vec<Value> = messages
        .iter()
        .map(|m| match m.role {
            Role::Tool => json!({
                "role": "tool",
                "tool_call_id": m.tool_call_id,
                "content": m.content,
            }),
            Role::Assistant if !m.tool_calls.is_empty() => json!({
                "role": "assistant",
                "content": m.content,
                "tool_calls": m.tool_calls.iter().map(|c| json!({
                    "id": c.id,
                    "type": "function",
                    "function": {
                        "name": c.name,
                        "arguments": serde_json::to_string(&c.arguments)
                            .expect("arguments serialize"),
                    },
                })).collect::<Vec<_>>(),
            }),
            role => json!({"role": role_str(role), "content": m.content}),
        })
        .collect();
    let mut body = json!({"model": cfg.model_id, "messages": msgs});
    if !tools.is_empty() {
        body["tools"] = Value::Array(
            tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.parameters,
                        },
                    })
                })
                .collect(),
        );
    }
    body
}

fn decode_openai(body: &Value, usage: &mut UsageTotals) -> Result<ChatMessage, LlmError> {
    let message = body
        .pointer("/choices/0/message")
        .and_then(Value::as_object)
        .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message".to_string()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        for call in calls {
            let id = call
                .get("id")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            let function = call
                .get("function")
                .and_then(Value::as_object)
                .ok_or_else(|| LlmError::MalformedResponse("tool call without function".into()))?;
            let name = function
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::MalformedResponse("tool call without name".into()))?
                .to_string();
            let raw = function.get("arguments").and_then(Value::as_str).unwrap_or("{}");
            // Unparseable argument text is preserved verbatim so the caller
            // can quote it in a repair request.
            let arguments =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            tool_calls.push(ToolCall {
                id,
                name,
                arguments,
            });
        }
    }
    usage.prompt_tokens += body
        .pointer("/usage/prompt_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    usage.completion_tokens += body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    Ok(ChatMessage {
        role: Role::Assistant,
        content,
        tool_calls,
        tool_call_id: None,
    })
}

fn encode_anthropic(cfg: &ProviderConfig, messages: &[ChatMessage], tools: &[ToolSchema]) -> Value {
    let system_text: Vec<&str> = messages
        .iter()
        .filter(|m| m.role == Role::System)
        .map(|m| m.content.as_str())
        .collect();
    let msgs: Vec<Value> = messages
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| match m.role {
            Role::Tool => json!({
                "role": "user",
                "content": [{
                    "type": "tool_result",
                    "tool_use_id": m.tool_call_id,
                    "content": m.content,
                }],
            }),
            Role::Assistant => {
                let mut blocks = Vec::new();
                if !m.content.is_empty() {
                    blocks.push(json!({"type": "text", "text": m.content}));
                }
                for call in &m.tool_calls {
                    blocks.push(json!({
                        "type": "tool_use",
                        "id": call.id,
                        "name": call.name,
                        "input": call.arguments,
                    }));
                }
                json!({"role": "assistant", "content": blocks})
            }
            _ => json!({
                "role": "user",
                "content": [{"type": "text", "text": m.content}],
            }),
        })
        .collect();
    let mut body = json!({
        "model": cfg.model_id,
        "max_tokens": cfg.max_tokens,
        "messages": msgs,
    });
    if !system_text.is_empty() {
        body["system"] = Value::String(system_text.join("\n\n"));
    }
    if !tools.is_empty() {
        body["tools"] = Value::Array(
            tools
                .iter()
                .map(|t| {
                    json!({
                        "name": t.name,
                        "description": t.description,
                        "input_schema": t.parameters,
                    })
                })
                .collect(),
        );
    }
    body
}

fn decode_anthropic(body: &Value, usage: &mut UsageTotals) -> Result<ChatMessage, LlmError> {
    let blocks = body
        .get("content")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::MalformedResponse("no content blocks".to_string()))?;
    let mut content = String::new();
    let mut tool_calls = Vec::new();
    for block in blocks {
        match block.get("type").and_then(Value::as_str) {
            Some("text") => {
                content.push_str(block.get("text").and_then(Value::as_str).unwrap_or(""));
            }
            Some("tool_use") => {
                tool_calls.push(ToolCall {
                    id: block
                        .get("id")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string(),
                    name: block
                        .get("name")
                        .and_then(Value::as_str)
                        .ok_or_else(|| {
                            LlmError::MalformedResponse("tool_use without name".into())
                        })?
                        .to_string(),
                    arguments: block.get("input").cloned().unwrap_or(json!({})),
                });
            }
            _ => {}
        }
    }
    usage.prompt_tokens += body
        .pointer("/usage/input_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    usage.completion_tokens += body
        .pointer("/usage/output_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    Ok(ChatMessage {
        role: Role::Assistant,
        content,
        tool_calls,
        tool_call_id: None,
    })
}

fn build_headers(cfg: &ProviderConfig, key: Option<&str>) -> Vec<(String, String)> {
    let mut headers = Vec::new();
    match cfg.dialect {
        Dialect::OpenaiStyle => {
            if let Some(key) = key {
                headers.push(("authorization".to_string(), format!("Bearer {key}")));
            }
        }
        Dialect::AnthropicStyle => {
            if let Some(key) = key {
                headers.push(("x-api-key".to_string(), key.to_string()));
            }
            headers.push(("anthropic-version".to_string(), "2023-06-01".to_string()));
        }
    }
    headers
}

/// One provider connection: config, transport, rate limiter, and usage
/// counters.
pub struct Client {
    config: ProviderConfig,
    transport: Box<dyn Transport>,
    limiter: RateLimiter,
    usage: UsageTotals,
}

impl Client {
    /// Live client over HTTPS.
    pub fn new(config: ProviderConfig) -> Result<Client, LlmError> {
        let transport = HttpTransport::new(Duration::from_secs_f64(config.timeout_s))?;
        Ok(Client::with_transport(config, Box::new(transport)))
    }

    /// Client over an explicit transport (recorder, replayer, or test mock).
    pub fn with_transport(config: ProviderConfig, transport: Box<dyn Transport>) -> Client {
        let limiter = RateLimiter::new(config.rate_limit_per_min);
        Client {
            config,
            transport,
            limiter,
            usage: UsageTotals::default(),
        }
    }

    /// Live client whose exchanges are appended to `path`.
    pub fn recording(config: ProviderConfig, path: &Path) -> Result<Client, LlmError> {
        let inner = HttpTransport::new(Duration::from_secs_f64(config.timeout_s))?;
        let transport = RecordingTransport::create(Box::new(inner), path)?;
        Ok(Client::with_transport(config, Box::new(transport)))
    }

    /// Offline client serving a recorded transcript.
    pub fn replaying(config: ProviderConfig, path: &Path) -> Result<Client, LlmError> {
        let transport = ReplayTransport::load(path)?;
        Ok(Client::with_transport(config, Box::new(transport)))
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn usage(&self) -> UsageTotals {
        self.usage
    }

    pub fn is_network(&self) -> bool {
        self.transport.requires_auth()
    }

    /// One chat completion with retries.
    ///
    /// A missing credential fails before any transport activity. 429 and
    /// 5xx responses (and retryable transport errors) are retried up to
    /// `max_retries` times with exponential backoff starting at
    /// `backoff_base_s`, the total wait capped by `backoff_cap_s`.
    pub fn complete(
        &mut self,
        messages: &[ChatMessage],
        tools: &[ToolSchema],
    ) -> Result<ChatMessage, LlmError> {
        let key = if self.transport.requires_auth() {
            Some(
                std::env::var(&self.config.api_key_env).map_err(|_| {
                    LlmError::AuthError(format!(
                        "environment variable {} is not set",
                        self.config.api_key_env
                    ))
                })?,
            )
        } else {
            None
        };
        let body = match self.config.dialect {
            Dialect::OpenaiStyle => encode_openai(&self.config, messages, tools),
            Dialect::AnthropicStyle => encode_anthropic(&self.config, messages, tools),
        };
        let request = WireRequest {
            endpoint: self.config.endpoint.clone(),
            body,
            headers: build_headers(&self.config, key.as_deref()),
        };

        let mut attempt = 0u32;
        let mut waited = 0.0f64;
        loop {
            self.limiter.admit();
            let outcome = self.transport.send(&request);
            let retry_reason = match &outcome {
                Ok(resp) if resp.status == 429 => Some("rate limited".to_string()),
                Ok(resp) if resp.status >= 500 => Some(format!("server error {}", resp.status)),
                Err(LlmError::TransportError {
                    detail,
                    retryable: true,
                }) => Some(detail.clone()),
                _ => None,
            };
            if let Some(_reason) = retry_reason {
                let remaining = self.config.backoff_cap_s - waited;
                if attempt < self.config.max_retries && remaining > 0.0 {
                    let wait = (self.config.backoff_base_s * 2f64.powi(attempt as i32))
                        .min(remaining)
                        .max(0.0);
                    if wait > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(wait));
                    }
                    waited += wait;
                    attempt += 1;
                    self.usage.retries += 1;
                    continue;
                }
            }
            let response = outcome?;
            return match response.status {
                200 => {
                    let message = match self.config.dialect {
                        Dialect::OpenaiStyle => decode_openai(&response.body, &mut self.usage)?,
                        Dialect::AnthropicStyle => {
                            decode_anthropic(&response.body, &mut self.usage)?
                        }
                    };
                    self.usage.calls += 1;
                    Ok(message)
                }
                401 | 403 => Err(LlmError::AuthError(format!(
                    "provider rejected the credential from {} (status {})",
                    self.config.api_key_env, response.status
                ))),
                429 => Err(LlmError::RateLimited { retries: attempt }),
                status if status >= 500 => Err(LlmError::TransportError {
                    detail: format!("server error {status} after {attempt} retries"),
                    retryable: true,
                }),
                status => Err(LlmError::TransportError {
                    detail: format!("unexpected status {status}"),
                    retryable: false,
                }),
            };
        }
    }
}

/// The fixed function set exposed to the model, mirroring the pipeline
/// stages: plan an analysis, read a measurement, propose sizes, and ask for
/// the comparison summary.
pub fn standard_tools() -> Vec<ToolSchema> {
    vec![
        ToolSchema {
            name: "run_analysis".to_string(),
            description: "Ask which simulation covers a performance metric. The harness runs \
                          the full plan automatically after apply_sizing; this reports what \
                          that plan contains."
                .to_string(),
            parameters: json!({
                "type": "object",
                "properties": {
                    "analysis": {
                        "type": "string",
                        "enum": ["OP", "DC_SWEEP", "AC", "TRAN"],
                        "description": "analysis kind to inspect",
                    },
                },
                "required": ["analysis"],
            }),
        },
        ToolSchema {
            name: "measure_metric".to_string(),
            description: "Read the latest measured value of one metric.".to_string(),
            parameters: json!({
                "type": "object",
                "properties": {
                    "metric": {
                        "type": "string",
                        "description": "metric name, e.g. gain_db, ugbw_hz, pm_deg",
                    },
                },
                "required": ["metric"],
            }),
        },
        ToolSchema {
            name: "apply_sizing".to_string(),
            description: "Propose the next design point: new values for tunable parameters \
                          plus the reasoning behind them."
                .to_string(),
            parameters: json!({
                "type": "object",
                "properties": {
                    "assignments": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "target": {"type": "string", "description": "tunable handle (element or group id)"},
                                "param": {"type": "string", "enum": ["W", "L", "DC"]},
                                "value": {"type": "number", "description": "new value in SI units (meters or volts)"},
                            },
                            "required": ["target", "param", "value"],
                        },
                    },
                    "rationale": {"type": "string", "description": "why these changes"},
                },
                "required": ["assignments", "rationale"],
            }),
        },
        ToolSchema {
            name: "report_comparison".to_string(),
            description: "Summarize the latest check of measurements against the targets."
                .to_string(),
            parameters: json!({"type": "object", "properties": {}}),
        },
    ]
}

/// Strictly parse `apply_sizing` arguments into a patch, validating field
/// names, types, parameter kinds, and that every target addresses a
/// declared tunable.
fn parse_apply_sizing(args: &Value, ctx: &ProposalContext<'_>) -> Result<ParamPatch, String> {
    let obj = args
        .as_object()
        .ok_or("arguments must be a JSON object".to_string())?;
    for key in obj.keys() {
        if key != "assignments" && key != "rationale" {
            return Err(format!("unexpected field '{key}'"));
        }
    }
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or("'rationale' must be a non-empty string".to_string())?;
    let list = obj
        .get("assignments")
        .and_then(Value::as_array)
        .ok_or("'assignments' must be an array".to_string())?;
    let mut assignments = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let entry = item
            .as_object()
            .ok_or(format!("assignments[{i}] must be an object"))?;
        for key in entry.keys() {
            if !matches!(key.as_str(), "target" | "param" | "value") {
                return Err(format!("assignments[{i}] has unexpected field '{key}'"));
            }
        }
        let target = entry
            .get("target")
            .and_then(Value::as_str)
            .ok_or(format!("assignments[{i}].target must be a string"))?;
        let param_text = entry
            .get("param")
            .and_then(Value::as_str)
            .ok_or(format!("assignments[{i}].param must be a string"))?;
        let param = TunableKind::parse(param_text).ok_or(format!(
            "assignments[{i}].param '{param_text}' is not one of W, L, DC"
        ))?;
        let value = entry
            .get("value")
            .and_then(Value::as_f64)
            .filter(|v| v.is_finite())
            .ok_or(format!("assignments[{i}].value must be a finite number"))?;
        let known = ctx
            .tunables
            .iter()
            .any(|t| t.key() == target && t.param == param);
        if !known {
            return Err(format!(
                "assignments[{i}] addresses unknown tunable {target}.{param}"
            ));
        }
        assignments.push(PatchAssignment {
            target: target.to_string(),
            param,
            value: PhysicalValue {
                magnitude: value,
                unit: param.unit(),
            },
        });
    }
    Ok(ParamPatch {
        assignments,
        rationale: rationale.to_string(),
    })
}

fn answer_run_analysis(ctx: &ProposalContext<'_>) -> String {
    let group = &ctx.history.group;
    let plan = plan_analyses(
        &group.metric_kinds(),
        group.supply_v / 2.0,
        group.load,
        group.supply_v,
    );
    let labels: Vec<String> = plan
        .iter()
        .map(|p| format!("{}/{}", p.spec.kind_name(), p.testbench.topology))
        .collect();
    format!(
        "the harness runs these analyses automatically after apply_sizing: {}",
        labels.join(", ")
    )
}

fn answer_measure_metric(args: &Value, ctx: &ProposalContext<'_>) -> String {
    let Some(name) = args.get("metric").and_then(Value::as_str) else {
        return "pass a 'metric' name, e.g. gain_db".to_string();
    };
    let Some(kind) = crate::metrics::MetricKind::parse(name) else {
        return format!("unknown metric '{name}'");
    };
    let last_report = ctx.history.records.iter().rev().find_map(|r| match &r.observation {
        crate::agent::Observation::Report(report) => Some(report),
        _ => None,
    });
    let Some(report) = last_report else {
        return "no measurements yet".to_string();
    };
    match report.get(kind) {
        Some(value) => format!("{kind} = {value} {}", kind.unit()),
        None => match report.absent.get(&kind) {
            Some(reason) => format!("{kind} unavailable: {reason}"),
            None => format!("{kind} was not requested in the last measurement"),
        },
    }
}

fn answer_report_comparison(ctx: &ProposalContext<'_>) -> String {
    let last_check = ctx
        .history
        .records
        .iter()
        .rev()
        .find_map(|r| r.check.as_ref());
    let Some(check) = last_check else {
        return "no comparison available yet".to_string();
    };
    if check.overall_pass {
        return "all targets met".to_string();
    }
    let lines: Vec<String> = check
        .checks
        .iter()
        .map(|c| {
            let verdict = if c.pass { "pass" } else { "FAIL" };
            match c.value {
                Some(v) => format!("{}: {v} ({verdict})", c.kind),
                None => format!(
                    "{}: unavailable ({})",
                    c.kind,
                    c.absent_reason.as_deref().unwrap_or("not measured")
                ),
            }
        })
        .collect();
    lines.join("; ")
}

/// Proposal engine backed by a chat model with tool calling.
///
/// Each proposal opens a fresh conversation from the rendered prompt and
/// loops over tool rounds: informational tools are answered from the run
/// context, and the first valid `apply_sizing` call becomes the patch.
/// Invalid `apply_sizing` arguments get exactly one repair round-trip (the
/// validation error is sent back as the tool result); a reply without tool
/// calls gets exactly one nudge.
pub struct LlmProposalEngine {
    client: Client,
    max_rounds: usize,
}

impl LlmProposalEngine {
    pub fn new(client: Client) -> LlmProposalEngine {
        LlmProposalEngine {
            client,
            max_rounds: 8,
        }
    }

    pub fn usage(&self) -> UsageTotals {
        self.client.usage()
    }
}

impl ProposalEngine for LlmProposalEngine {
    fn descriptor(&self) -> EngineDescriptor {
        EngineDescriptor {
            name: format!("llm({})", self.client.config().model_id),
            deterministic: !self.client.is_network(),
            requires_network: self.client.is_network(),
        }
    }

    fn propose(
        &mut self,
        prompt: &PromptBundle,
        ctx: &ProposalContext<'_>,
    ) -> Result<ParamPatch, EngineFailure> {
        let tools = standard_tools();
        let mut messages = vec![
            ChatMessage::system(prompt.system.clone()),
            ChatMessage::user(format!("{}\n{}", prompt.context, prompt.cot_instructions)),
        ];
        let mut repair_used = false;
        let mut nudge_used = false;

        for _round in 0..self.max_rounds {
            let reply = self.client.complete(&messages, &tools).map_err(|e| match e {
                LlmError::MalformedResponse(_)
                | LlmError::ReplayMismatch { .. }
                | LlmError::ReplayExhausted
                | LlmError::TranscriptParse { .. } => EngineFailure::Malformed(e.to_string()),
                other => EngineFailure::Transport(other.to_string()),
            })?;
            messages.push(reply.clone());

            if reply.tool_calls.is_empty() {
                if nudge_used {
                    return Err(EngineFailure::Malformed(
                        "model answered in prose twice; no apply_sizing call".to_string(),
                    ));
                }
                nudge_used = true;
                messages.push(ChatMessage::user(
                    "Respond by calling apply_sizing with your chosen assignments.",
                ));
                continue;
            }

            let mut accepted: Option<ParamPatch> = None;
            let mut rejected: Option<String> = None;
            for call in &reply.tool_calls {
                let result_text = match call.name.as_str() {
                    "apply_sizing" => match parse_apply_sizing(&call.arguments, ctx) {
                        Ok(patch) => {
                            let text = "accepted".to_string();
                            accepted.get_or_insert(patch);
                            text
                        }
                        Err(problem) => {
                            let text = format!(
                                "invalid arguments: {problem}. Call apply_sizing again with \
                                 corrected arguments."
                            );
                            rejected.get_or_insert(problem);
                            text
                        }
                    },
                    "run_analysis" => answer_run_analysis(ctx),
                    "measure_metric" => answer_measure_metric(&call.arguments, ctx),
                    "report_comparison" => answer_report_comparison(ctx),
                    other => format!("unknown tool '{other}'"),
                };
                messages.push(ChatMessage::tool_result(call.id.clone(), result_text));
            }
            if let Some(patch) = accepted {
                return Ok(patch);
            }
            if let Some(problem) = rejected {
                if repair_used {
                    return Err(EngineFailure::Malformed(format!(
                        "apply_sizing arguments still invalid after repair: {problem}"
                    )));
                }
                repair_used = true;
            }
        }
        Err(EngineFailure::Malformed(format!(
            "no valid apply_sizing call within {} tool rounds",
            self.max_rounds
        )))
    }
}
