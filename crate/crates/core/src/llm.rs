//! Chat-completions protocol: message types, an HTTP client for OpenAI-compatible
//! endpoints, and a deterministic scripted mock (in-process or served over HTTP).
//!
//! Every call made through [`chat`] appends exactly one [`UsageRecord`] to a
//! [`Ledger`]; endpoints never write to the ledger themselves.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::Tokenizer;
use crate::ledger::Ledger;

pub const ENDPOINT_ENV: &str = "DEEPSEARCH_ENDPOINT";
pub const API_KEY_ENV: &str = "DEEPSEARCH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    /// Output budget paired with each effort level: 2k, 8k and 16k tokens.
    pub fn max_output_tokens(self) -> u32 {
        match self {
            ReasoningEffort::Low => 2048,
            ReasoningEffort::Medium => 8192,
            ReasoningEffort::High => 16384,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

impl fmt::Display for ReasoningEffort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReasoningEffort {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "medium" | "med" => Ok(Self::Medium),
            "high" => Ok(Self::High),
            other => Err(format!("unknown reasoning effort {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Search,
    Rerank,
    Judge,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Search, Stage::Rerank, Stage::Judge];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Rerank => "rerank",
            Stage::Judge => "judge",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    /// JSON-encoded arguments object, as carried on the wire.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_tool_calls(content: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_calls,
            tool_call_id: None,
        }
    }

    pub fn tool(tool_call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(tool_call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: String,
    pub description: String,
    /// JSON schema of the arguments object.
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolDefinition>,
    pub reasoning_effort: Option<ReasoningEffort>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, max_output_tokens: u32) -> Self {
        Self {
            model: model.into(),
            messages,
            tools: Vec::new(),
            reasoning_effort: None,
            max_output_tokens,
            temperature: 0.0,
        }
    }

    /// Text the mock routes on: content of the last user or tool message.
    pub fn last_user_or_tool_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, Role::User | Role::Tool))
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Token usage as reported by an endpoint for a single call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedUsage {
    pub input_total: u64,
    pub input_cached: u64,
    pub output_total: u64,
    pub output_reasoning: u64,
    /// Set when any split was filled locally rather than reported.
    #[serde(default)]
    pub estimated: bool,
}

/// One accounted chat call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub qid: String,
    pub stage: Stage,
    pub call_seq: u64,
    pub input_total: u64,
    pub input_cached: u64,
    pub output_total: u64,
    pub output_reasoning: u64,
    #[serde(default)]
    pub estimated: bool,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub message: ChatMessage,
    pub usage: ReportedUsage,
    /// Attempts beyond the first that were needed.
    pub retries: u32,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock script exhausted after {served} response(s)")]
    ScriptExhausted { served: usize },
    #[error("invalid mock script line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport { .. } => true,
            LlmError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

/// Exponential backoff: `max_attempts` tries, sleeping `base_delay * 2^i` between them.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails with a non-retryable error, or attempts
    /// run out. Returns the value and the number of retries used.
    pub fn run<T, E>(&self, mut op: impl FnMut() -> Result<T, E>, retryable: impl Fn(&E) -> bool) -> Result<(T, u32), E> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if retryable(&e) && attempt + 1 < attempts => {
                    log::warn!("retryable failure on attempt {}: retrying", attempt + 1);
                    thread::sleep(self.base_delay * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// A chat-completions backend.
pub trait ChatEndpoint: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

/// Who a call is accounted to.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub qid: &'a str,
    pub stage: Stage,
}

#[derive(Debug, Clone)]
pub struct ChatOutcome {
    pub message: ChatMessage,
    pub record: UsageRecord,
    pub retries: u32,
}

/// Sends one chat request and appends its usage to `ledger`.
pub fn chat(endpoint: &dyn ChatEndpoint, request: &ChatRequest, ctx: CallContext<'_>, ledger: &Ledger) -> Result<ChatOutcome, LlmError> {
    if request.max_output_tokens == 0 {
        return Err(LlmError::InvalidRequest("max_output_tokens must be at least 1".into()));
    }
    let completion = endpoint.complete(request)?;
    let record = ledger.append(ctx.qid, ctx.stage, completion.usage);
    Ok(ChatOutcome {
        message: completion.message,
        record,
        retries: completion.retries,
    })
}

// --- wire format -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireToolCall {
    #[serde(default)]
    id: String,
    #[serde(rename = "type", default = "function_type")]
    kind: String,
    function: WireFunction,
}

fn function_type() -> String {
    "function".into()
}

#[derive(Debug, Serialize, Deserialize)]
struct WireMessage {
    role: Role,
    #[serde(default)]
    content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_calls: Option<Vec<WireToolCall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool_call_id: Option<String>,
}

impl From<&ChatMessage> for WireMessage {
    fn from(m: &ChatMessage) -> Self {
        let tool_calls = (!m.tool_calls.is_empty()).then(|| {
            m.tool_calls
                .iter()
                .map(|c| WireToolCall {
                    id: c.id.clone(),
                    kind: function_type(),
                    function: WireFunction {
                        name: c.name.clone(),
                        arguments: c.arguments.clone(),
                    },
                })
                .collect()
        });
        let content = if m.content.is_empty() && tool_calls.is_some() {
            None
        } else {
            Some(m.content.clone())
        };
        Self {
            role: m.role,
            content,
            tool_calls,
            tool_call_id: m.tool_call_id.clone(),
        }
    }
}

impl From<WireMessage> for ChatMessage {
    fn from(w: WireMessage) -> Self {
        Self {
            role: w.role,
            content: w.content.unwrap_or_default(),
            tool_calls: w
                .tool_calls
                .unwrap_or_default()
                .into_iter()
                .map(|c| ToolCall {
                    id: c.id,
                    name: c.function.name,
                    arguments: c.function.arguments,
                })
                .collect(),
            tool_call_id: w.tool_call_id,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct WirePromptDetails {
    #[serde(default)]
    cached_tokens: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct WireCompletionDetails {
    #[serde(default)]
    reasoning_tokens: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    total_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_tokens_details: Option<WirePromptDetails>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    completion_tokens_details: Option<WireCompletionDetails>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: u32,
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    #[serde(default)]
    id: String,
    #[serde(default)]
    object: String,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<WireMessage> = request.messages.iter().map(WireMessage::from).collect();
    let mut body = json!({
        "model": request.model,
        "messages": messages,
        "max_tokens": request.max_output_tokens,
        "temperature": request.temperature,
    });
    if let Some(effort) = request.reasoning_effort {
        body["reasoning_effort"] = json!(effort.as_str());
    }
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
    }
    body
}

/// Local estimate of a message's prompt tokens: content plus tool-call names and arguments.
pub fn message_tokens(tokenizer: &dyn Tokenizer, m: &ChatMessage) -> u64 {
    let calls: usize = m
        .tool_calls
        .iter()
        .map(|c| tokenizer.count_tokens(&c.name) + tokenizer.count_tokens(&c.arguments))
        .sum();
    (tokenizer.count_tokens(&m.content) + calls) as u64
}

fn usage_from_wire(usage: Option<WireUsage>, request: &ChatRequest, reply: &ChatMessage, tokenizer: &dyn Tokenizer) -> ReportedUsage {
    let Some(u) = usage else {
        let input = request.messages.iter().map(|m| message_tokens(tokenizer, m)).sum();
        return ReportedUsage {
            input_total: input,
            input_cached: 0,
            output_total: message_tokens(tokenizer, reply),
            output_reasoning: 0,
            estimated: true,
        };
    };
    let cached = u.prompt_tokens_details.and_then(|d| d.cached_tokens);
    let reasoning = u.completion_tokens_details.and_then(|d| d.reasoning_tokens);
    let mut estimated = cached.is_none() || reasoning.is_none();
    let mut input_cached = cached.unwrap_or(0);
    let mut output_reasoning = reasoning.unwrap_or(0);
    if input_cached > u.prompt_tokens {
        input_cached = u.prompt_tokens;
        estimated = true;
    }
    if output_reasoning > u.completion_tokens {
        output_reasoning = u.completion_tokens;
        estimated = true;
    }
    ReportedUsage {
        input_total: u.prompt_tokens,
        input_cached,
        output_total: u.completion_tokens,
        output_reasoning,
        estimated,
    }
}

/// Client for any OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatEndpoint {
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    tokenizer: Arc<dyn Tokenizer>,
    client: reqwest::blocking::Client,
}

impl HttpChatEndpoint {
    /// `base_url` may be the API root (`http://host/v1`) or the full completions URL.
    pub fn new(base_url: &str, api_key: Option<String>, tokenizer: Arc<dyn Tokenizer>) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Self {
            url,
            api_key,
            retry: RetryPolicy::default(),
            tokenizer,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(1800))
                .build()
                .expect("http client builds"),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &Value) -> Result<WireResponse, LlmError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport {
            message: e.to_string(),
            attempts: 1,
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport {
            message: e.to_string(),
            attempts: 1,
        })?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Protocol(format!("malformed response body: {e}")))
    }
}

impl ChatEndpoint for HttpChatEndpoint {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let body = request_body(request);
        let (resp, retries) = self
            .retry
            .run(|| self.attempt(&body), LlmError::is_retryable)
            .map_err(|e| match e {
                LlmError::Transport { message, .. } => LlmError::Transport {
                    message,
                    attempts: self.retry.max_attempts,
                },
                other => other,
            })?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
        let message: ChatMessage = choice.message.into();
        let usage = usage_from_wire(resp.usage, request, &message, self.tokenizer.as_ref());
        Ok(Completion {
            message,
            usage,
            retries,
        })
    }
}

// --- scripted mock ---------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptUsage {
    #[serde(default)]
    pub input: u64,
    #[serde(default)]
    pub cached: u64,
    #[serde(default)]
    pub output: u64,
    #[serde(default)]
    pub reasoning: u64,
}

impl From<ScriptUsage> for ReportedUsage {
    fn from(u: ScriptUsage) -> Self {
        Self {
            input_total: u.input,
            input_cached: u.cached,
            output_total: u.output,
            output_reasoning: u.reasoning,
            estimated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default = "search_tool_name")]
    pub name: String,
    /// Either a JSON object or an already-encoded JSON string.
    pub arguments: Value,
}

fn search_tool_name() -> String {
    "search".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ScriptToolCall>,
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Serve only when this substring occurs in the last user/tool message.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub match_text: Option<String>,
    pub reply: ScriptReply,
    #[serde(default)]
    pub usage: ScriptUsage,
    /// Reusable entries are never consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, LlmError> {
        for (i, e) in entries.iter().enumerate() {
            validate_entry(e, i + 1)?;
        }
        Ok(Self { entries })
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| LlmError::Script {
                line: idx + 1,
                message: e.to_string(),
            })?;
            validate_entry(&entry, idx + 1)?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Script {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("script entry serializes") + "\n")
            .collect()
    }
}

fn validate_entry(e: &ScriptEntry, line: usize) -> Result<(), LlmError> {
    let err = |message: &str| LlmError::Script {
        line,
        message: message.to_string(),
    };
    if e.usage.cached > e.usage.input {
        return Err(err("usage.cached exceeds usage.input"));
    }
    if e.usage.reasoning > e.usage.output {
        return Err(err("usage.reasoning exceeds usage.output"));
    }
    if e.reply.content.is_none() && e.reply.tool_calls.is_empty() {
        return Err(err("reply needs content or tool_calls"));
    }
    for c in &e.reply.tool_calls {
        if !(c.arguments.is_object() || c.arguments.is_string()) {
            return Err(err("tool call arguments must be an object or a string"));
        }
    }
    Ok(())
}

/// In-process scripted endpoint.
///
/// Selection per request: the first unconsumed entry whose `match` substring occurs
/// in the last user/tool message; otherwise the first unconsumed entry without a
/// `match`; otherwise the script is exhausted.
pub struct ScriptedMock {
    entries: Vec<ScriptEntry>,
    state: Mutex<MockState>,
}

struct MockState {
    consumed: Vec<bool>,
    served: usize,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        let n = script.entries.len();
        Self {
            entries: script.entries,
            state: Mutex::new(MockState {
                consumed: vec![false; n],
                served: 0,
            }),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(MockScript::load(path)?))
    }

    pub fn served(&self) -> usize {
        self.state.lock().unwrap().served
    }

    /// Number of non-repeating entries not yet served.
    pub fn remaining(&self) -> usize {
        let st = self.state.lock().unwrap();
        self.entries
            .iter()
            .zip(&st.consumed)
            .filter(|(e, used)| !e.repeat && !**used)
            .count()
    }

    fn select(&self, routing_text: &str) -> Result<(usize, ScriptEntry), LlmError> {
        let mut st = self.state.lock().unwrap();
        let available = |i: usize, st: &MockState| self.entries[i].repeat || !st.consumed[i];
        let pick = (0..self.entries.len())
            .find(|&i| {
                available(i, &st)
                    && self.entries[i]
                        .match_text
                        .as_deref()
                        .is_some_and(|m| routing_text.contains(m))
            })
            .or_else(|| (0..self.entries.len()).find(|&i| available(i, &st) && self.entries[i].match_text.is_none()));
        let Some(i) = pick else {
            return Err(LlmError::ScriptExhausted { served: st.served });
        };
        st.consumed[i] = true;
        let serial = st.served;
        st.served += 1;
        Ok((serial, self.entries[i].clone()))
    }

    fn respond(&self, routing_text: &str) -> Result<(ChatMessage, ReportedUsage), LlmError> {
        let (serial, entry) = self.select(routing_text)?;
        let tool_calls = entry
            .reply
            .tool_calls
            .iter()
            .enumerate()
            .map(|(j, c)| ToolCall {
                id: c.id.clone().unwrap_or_else(|| format!("call_{serial}_{j}")),
                name: c.name.clone(),
                arguments: match &c.arguments {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                },
            })
            .collect();
        let message = ChatMessage::assistant_tool_calls(entry.reply.content.unwrap_or_default(), tool_calls);
        Ok((message, entry.usage.into()))
    }
}

impl ChatEndpoint for ScriptedMock {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let (message, usage) = self.respond(request.last_user_or_tool_content())?;
        Ok(Completion {
            message,
            usage,
            retries: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockServerOptions {
    /// Answer this many initial requests with HTTP 500 before serving the script.
    pub fail_first: u32,
}

/// A scripted mock listening on a loopback port and speaking the chat-completions protocol.
///
/// Requests are handled one at a time on a single thread, so sequential scripts stay
/// in order. Exhaustion is reported as HTTP 410 with an error body.
pub struct MockServer {
    url: String,
    server: Arc<tiny_http::Server>,
    mock: Arc<ScriptedMock>,
    requests: Arc<AtomicU32>,
    handle: Option<JoinHandle<()>>,
}

/// Starts a mock server for the script at `script_path`.
pub fn mock_serve(script_path: &Path) -> Result<MockServer, LlmError> {
    MockServer::start(MockScript::load(script_path)?, MockServerOptions::default())
}

impl MockServer {
    pub fn start(script: MockScript, options: MockServerOptions) -> Result<Self, LlmError> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| LlmError::Transport {
            message: e.to_string(),
            attempts: 1,
        })?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| LlmError::Protocol("mock server has no ip address".into()))?;
        let server = Arc::new(server);
        let mock = Arc::new(ScriptedMock::new(script));
        let requests = Arc::new(AtomicU32::new(0));
        let handle = {
            let server = Arc::clone(&server);
            let mock = Arc::clone(&mock);
            let requests = Arc::clone(&requests);
            thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = if n < options.fail_first {
                        (500, json!({"error": {"message": "injected failure"}}))
                    } else {
                        handle_mock_request(&mock, &mut req)
                    };
                    let response = tiny_http::Response::from_string(body.to_string())
                        .with_status_code(status)
                        .with_header(
                            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                                .expect("static header"),
                        );
                    let _ = req.respond(response);
                }
            })
        };
        Ok(Self {
            url: format!("http://127.0.0.1:{port}/v1"),
            server,
            mock,
            requests,
            handle: Some(handle),
        })
    }

    /// API root, e.g. `http://127.0.0.1:PORT/v1`.
    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn served(&self) -> usize {
        self.mock.served()
    }

    pub fn requests(&self) -> u32 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_mock_request(mock: &ScriptedMock, req: &mut tiny_http::Request) -> (u16, Value) {
    #[derive(Deserialize)]
    struct Incoming {
        messages: Vec<WireMessage>,
    }
    let mut body = String::new();
    if let Err(e) = req.as_reader().read_to_string(&mut body) {
        return (400, json!({"error": {"message": e.to_string()}}));
    }
    let incoming: Incoming = match serde_json::from_str(&body) {
        Ok(v) => v,
        Err(e) => return (400, json!({"error": {"message": e.to_string()}})),
    };
    let messages: Vec<ChatMessage> = incoming.messages.into_iter().map(Into::into).collect();
    let routing = messages
        .iter()
        .rev()
        .find(|m| matches!(m.role, Role::User | Role::Tool))
        .map(|m| m.content.as_str())
        .unwrap_or("");
    match mock.respond(routing) {
        Ok((message, usage)) => {
            let finish = if message.tool_calls.is_empty() { "stop" } else { "tool_calls" };
            let resp = WireResponse {
                id: format!("mock-{}", mock.served()),
                object: "chat.completion".into(),
                choices: vec![WireChoice {
                    index: 0,
                    message: WireMessage::from(&message),
                    finish_reason: Some(finish.into()),
                }],
                usage: Some(WireUsage {
                    prompt_tokens: usage.input_total,
                    completion_tokens: usage.output_total,
                    total_tokens: usage.input_total + usage.output_total,
                    prompt_tokens_details: Some(WirePromptDetails {
                        cached_tokens: Some(usage.input_cached),
                    }),
                    completion_tokens_details: Some(WireCompletionDetails {
                        reasoning_tokens: Some(usage.output_reasoning),
                    }),
                }),
            };
            (200, serde_json::to_value(resp).expect("response serializes"))
        }
        Err(e) => (410, json!({"error": {"message": e.to_string()}})),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WhitespaceTokenizer;

    fn usage_line(content: &str, input: u64, cached: u64, output: u64, reasoning: u64) -> String {
        json!({"reply": {"content": content}, "usage": {"input": input, "cached": cached, "output": output, "reasoning": reasoning}}).to_string()
    }

    #[test]
    fn effort_budgets() {
        assert_eq!(ReasoningEffort::Low.max_output_tokens(), 2048);
        assert_eq!(ReasoningEffort::Medium.max_output_tokens(), 8192);
        assert_eq!(ReasoningEffort::High.max_output_tokens(), 16384);
        assert_eq!("med".parse::<ReasoningEffort>().unwrap(), ReasoningEffort::Medium);
    }

    #[test]
    fn mock_usage_passthrough() {
        let script = MockScript::parse(&usage_line("hi", 100, 40, 10, 7)).unwrap();
        let mock = ScriptedMock::new(script);
        let ledger = Ledger::new();
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")], 16);
        let out = chat(&mock, &req, CallContext { qid: "q1", stage: Stage::Search }, &ledger).unwrap();
        assert_eq!(out.message.content, "hi");
        let r = &ledger.records()[0];
        assert_eq!((r.input_total, r.input_cached, r.output_total, r.output_reasoning), (100, 40, 10, 7));
        assert!(!r.estimated);
        assert_eq!(r.stage, Stage::Search);
    }

    #[test]
    fn exhaustion_after_script() {
        let text = [usage_line("a", 1, 0, 1, 0), usage_line("b", 1, 0, 1, 0)].join("\n");
        let mock = ScriptedMock::new(MockScript::parse(&text).unwrap());
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")], 16);
        assert_eq!(mock.complete(&req).unwrap().message.content, "a");
        assert_eq!(mock.complete(&req).unwrap().message.content, "b");
        assert!(matches!(mock.complete(&req), Err(LlmError::ScriptExhausted { served: 2 })));
    }

    #[test]
    fn match_routing() {
        let text = [
            json!({"reply": {"content": "search-turn"}}).to_string(),
            json!({"match": "You are RankLLM", "reply": {"content": "[2] > [1]"}, "repeat": true}).to_string(),
        ]
        .join("\n");
        let mock = ScriptedMock::new(MockScript::parse(&text).unwrap());
        let rr = ChatRequest::new("m", vec![ChatMessage::user("You are RankLLM, ...")], 16);
        let sr = ChatRequest::new("m", vec![ChatMessage::user("You are a deep research agent")], 16);
        assert_eq!(mock.complete(&rr).unwrap().message.content, "[2] > [1]");
        assert_eq!(mock.complete(&sr).unwrap().message.content, "search-turn");
        assert_eq!(mock.complete(&rr).unwrap().message.content, "[2] > [1]");
        assert!(mock.complete(&sr).is_err());
    }

    #[test]
    fn script_validation_rejects_bad_usage() {
        assert!(MockScript::parse(&usage_line("a", 10, 11, 1, 0)).is_err());
        assert!(MockScript::parse(&usage_line("a", 10, 0, 1, 2)).is_err());
        assert!(MockScript::parse(r#"{"reply": {}}"#).is_err());
    }

    #[test]
    fn tool_call_ids_and_arguments() {
        let text = json!({"reply": {"tool_calls": [{"arguments": {"query": "x"}}, {"id": "c9", "arguments": "{\"query\":\"y\"}"}]}}).to_string();
        let mock = ScriptedMock::new(MockScript::parse(&text).unwrap());
        let msg = mock
            .complete(&ChatRequest::new("m", vec![ChatMessage::user("q")], 16))
            .unwrap()
            .message;
        assert_eq!(msg.tool_calls[0].id, "call_0_0");
        assert_eq!(msg.tool_calls[0].name, "search");
        assert_eq!(msg.tool_calls[0].arguments, r#"{"query":"x"}"#);
        assert_eq!(msg.tool_calls[1].id, "c9");
    }

    #[test]
    fn usage_fill_rules() {
        let req = ChatRequest::new("m", vec![ChatMessage::user("a b c")], 16);
        let reply = ChatMessage::assistant("d e");
        let tok = WhitespaceTokenizer;
        let no_details = WireUsage {
            prompt_tokens: 10,
            completion_tokens: 3,
            total_tokens: 13,
            prompt_tokens_details: None,
            completion_tokens_details: Some(WireCompletionDetails { reasoning_tokens: Some(1) }),
        };
        let u = usage_from_wire(Some(no_details), &req, &reply, &tok);
        assert_eq!((u.input_total, u.input_cached, u.output_reasoning, u.estimated), (10, 0, 1, true));
        let missing = usage_from_wire(None, &req, &reply, &tok);
        assert_eq!((missing.input_total, missing.output_total, missing.estimated), (3, 2, true));
    }

    #[test]
    fn retry_policy_counts() {
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        };
        let mut calls = 0;
        let (v, retries) = policy
            .run(
                || {
                    calls += 1;
                    if calls < 3 { Err("boom") } else { Ok(7) }
                },
                |_| true,
            )
            .unwrap();
        assert_eq!((v, retries, calls), (7, 2, 3));
        let mut calls = 0;
        let res: Result<((), u32), &str> = policy.run(
            || {
                calls += 1;
                Err("boom")
            },
            |_| true,
        );
        assert!(res.is_err());
        assert_eq!(calls, 3);
    }
}
