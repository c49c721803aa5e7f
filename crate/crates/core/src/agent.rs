//! The deep-research loop: a reasoning model calls a single `search` tool until
//! it commits to a structured final answer.
//!
//! Every run produces a [`RunTrace`], an ordered event log that serializes to
//! JSONL (one event per line, `qid` + monotone `seq` + `type`) and replays back
//! into the same trace.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusStore, Tokenizer, CANDIDATE_TOKEN_LIMIT};
use crate::eval::QueryTask;
use crate::ledger::Ledger;
use crate::llm::{chat, message_tokens, CallContext, ChatEndpoint, ChatMessage, ChatRequest, ReasoningEffort, Role, Stage, ToolCall, ToolDefinition, UsageRecord};
use crate::rerank::{handoff_topk, ListwiseReranker, RerankConfig, RerankError};
use crate::retrieval::Retriever;

pub const SEARCH_TOOL: &str = "search";
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 131_072;
pub const DEFAULT_MAX_SEARCH_CALLS: usize = 100;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("output budget {output} leaves no room in a {context}-token context")]
    OutputExceedsContext { output: u32, context: usize },
    #[error("rerank depth {0} configured but no reranker endpoint supplied")]
    MissingReranker(usize),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub model: String,
    pub reasoning_effort: ReasoningEffort,
    /// Overrides the effort's default output budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    pub max_context_tokens: usize,
    pub max_search_calls: usize,
    pub handoff_k: usize,
    pub candidate_token_limit: usize,
    pub rerank: RerankConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            model: "search-agent".into(),
            reasoning_effort: ReasoningEffort::Low,
            max_output_tokens: None,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            max_search_calls: DEFAULT_MAX_SEARCH_CALLS,
            handoff_k: 5,
            candidate_token_limit: CANDIDATE_TOKEN_LIMIT,
            rerank: RerankConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn output_budget(&self) -> u32 {
        self.max_output_tokens
            .unwrap_or_else(|| self.reasoning_effort.max_output_tokens())
    }

    /// Prompt tokens available once the output budget is reserved.
    pub fn prompt_budget(&self) -> usize {
        self.max_context_tokens
            .saturating_sub(self.output_budget() as usize)
    }

    /// How many candidates the first-stage retriever returns per search.
    pub fn retrieval_depth(&self) -> usize {
        if self.rerank.enabled() {
            self.rerank.depth
        } else {
            self.handoff_k
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let output = self.output_budget();
        if output == 0 || output as usize >= self.max_context_tokens {
            return Err(AgentError::OutputExceedsContext {
                output,
                context: self.max_context_tokens,
            });
        }
        if self.rerank.enabled() {
            self.rerank.validate()?;
        }
        Ok(())
    }
}

pub fn build_search_prompt(question: &str) -> Result<String, AgentError> {
    if question.trim().is_empty() {
        return Err(AgentError::EmptyQuestion);
    }
    Ok(format!(
        "You are a deep research agent. You need to answer the given question by interacting with a search engine, using the search tool provided. Please perform reasoning and use the tool step by step, in an interleaved manner. You may use the search tool multiple times.

Question: {question}

Your response should be in the following format:
Explanation: {{your explanation for your final answer. For this explanation section only, you should cite your evidence documents inline by enclosing their docids in square brackets [] at the end of sentences. For example, [20].}}
Exact Answer: {{your succinct, final answer}}
Confidence: {{your confidence score between 0% and 100% for your answer}}"
    ))
}

pub fn search_tool() -> ToolDefinition {
    ToolDefinition {
        name: SEARCH_TOOL.into(),
        description: "Search the document collection. Returns the top documents as a JSON list of {docid, text}.".into(),
        parameters: json!({
            "type": "object",
            "properties": {
                "query": {"type": "string", "description": "The search query."}
            },
            "required": ["query"]
        }),
    }
}

// --- final answer ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub explanation: String,
    pub exact_answer: String,
    /// In [0, 1].
    pub confidence: f64,
    /// The unparsed assistant text, as given to the judge.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnswer {
    pub answer: FinalAnswer,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerParseError {
    #[error("no Exact Answer field")]
    MissingExactAnswer,
    #[error("Exact Answer field is empty")]
    EmptyExactAnswer,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Explanation,
    Exact,
    Confidence,
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s*#>_-]*(explanation|exact[ _]answer|confidence)[\s*_]*:[\s*]*(.*)$").expect("valid regex")
    })
}

fn clean_value(lines: &[&str]) -> String {
    lines.join("\n").trim().trim_end_matches('*').trim().to_string()
}

/// Confidence as a fraction, plus a flag when it was clamped or unreadable.
fn parse_confidence(raw: &str) -> (f64, Option<&'static str>) {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| Regex::new(r"(-?\d+(?:\.\d+)?)\s*(%?)").expect("valid regex"));
    let Some(c) = re.captures(raw) else {
        return (1.0, Some("confidence_unparsed"));
    };
    let Ok(v) = c[1].parse::<f64>() else {
        return (1.0, Some("confidence_unparsed"));
    };
    let frac = if !c[2].is_empty() || v > 1.0 { v / 100.0 } else { v };
    if (0.0..=1.0).contains(&frac) {
        (frac, None)
    } else {
        (frac.clamp(0.0, 1.0), Some("confidence_clamped"))
    }
}

/// Extracts the Explanation / Exact Answer / Confidence block.
///
/// Labels match case-insensitively at line start and may span several lines;
/// the last occurrence of each label wins.
pub fn parse_final_answer(text: &str) -> Result<ParsedAnswer, AnswerParseError> {
    let mut explanation: Option<Vec<&str>> = None;
    let mut exact: Option<Vec<&str>> = None;
    let mut confidence: Option<Vec<&str>> = None;
    let mut current: Option<Field> = None;
    for line in text.lines() {
        if let Some(c) = label_re().captures(line) {
            let label = c[1].to_ascii_lowercase();
            let field = if label.starts_with("expl") {
                Field::Explanation
            } else if label.starts_with("conf") {
                Field::Confidence
            } else {
                Field::Exact
            };
            let first = vec![c.get(2).map_or("", |m| m.as_str())];
            match field {
                Field::Explanation => explanation = Some(first),
                Field::Exact => exact = Some(first),
                Field::Confidence => confidence = Some(first),
            }
            current = Some(field);
        } else if let Some(field) = current {
            let slot = match field {
                Field::Explanation => &mut explanation,
                Field::Exact => &mut exact,
                Field::Confidence => &mut confidence,
            };
            if let Some(lines) = slot.as_mut() {
                lines.push(line);
            }
        }
    }
    let exact_answer = clean_value(&exact.ok_or(AnswerParseError::MissingExactAnswer)?);
    if exact_answer.is_empty() {
        return Err(AnswerParseError::EmptyExactAnswer);
    }
    let mut flags = Vec::new();
    let confidence = match confidence {
        None => {
            flags.push("confidence_missing".to_string());
            1.0
        }
        Some(lines) => {
            let (c, flag) = parse_confidence(&clean_value(&lines));
            flags.extend(flag.map(str::to_string));
            c
        }
    };
    Ok(ParsedAnswer {
        answer: FinalAnswer {
            explanation: explanation.map(|l| clean_value(&l)).unwrap_or_default(),
            exact_answer,
            confidence,
            response: text.to_string(),
        },
        flags,
    })
}

// --- context budget --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pinned messages need {required} tokens, budget is {budget}")]
pub struct ContextExhausted {
    pub required: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextOutcome {
    pub messages: Vec<ChatMessage>,
    pub dropped_messages: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

pub fn history_tokens(messages: &[ChatMessage], tokenizer: &dyn Tokenizer) -> usize {
    messages
        .iter()
        .map(|m| message_tokens(tokenizer, m) as usize)
        .sum()
}

/// Length of the never-dropped prefix: leading system messages and the first user message.
fn pinned_len(messages: &[ChatMessage]) -> usize {
    let mut i = 0;
    while i < messages.len() && messages[i].role == Role::System {
        i += 1;
    }
    if i < messages.len() && messages[i].role == Role::User {
        i += 1;
    }
    i
}

/// Splits `messages[from..]` into droppable units: each assistant message with the
/// tool results that follow it.
fn units(messages: &[ChatMessage], from: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for i in from..messages.len() {
        match out.last_mut() {
            Some(last) if messages[i].role == Role::Tool => last.1 = i + 1,
            _ => out.push((i, i + 1)),
        }
    }
    out
}

/// Drops the oldest call/result units until the history fits `budget` tokens.
///
/// The pinned prefix and the latest unit are never dropped.
pub fn enforce_context(messages: &[ChatMessage], budget: usize, tokenizer: &dyn Tokenizer) -> Result<ContextOutcome, ContextExhausted> {
    let cost: Vec<usize> = messages
        .iter()
        .map(|m| message_tokens(tokenizer, m) as usize)
        .collect();
    let total: usize = cost.iter().sum();
    let pinned = pinned_len(messages);
    let units = units(messages, pinned);
    let unit_cost = |&(a, b): &(usize, usize)| cost[a..b].iter().sum::<usize>();
    let required = cost[..pinned].iter().sum::<usize>() + units.last().map_or(0, unit_cost);
    if required > budget {
        return Err(ContextExhausted { required, budget });
    }
    let mut current = total;
    let mut drop_units = 0;
    while current > budget && drop_units + 1 < units.len() {
        current -= unit_cost(&units[drop_units]);
        drop_units += 1;
    }
    let cut = units.get(drop_units).map_or(messages.len(), |u| u.0);
    let dropped_messages = cut - pinned;
    let mut kept = messages[..pinned].to_vec();
    kept.extend_from_slice(&messages[cut..]);
    Ok(ContextOutcome {
        messages: kept,
        dropped_messages,
        tokens_before: total,
        tokens_after: current,
    })
}

// --- trace -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// A final answer was parsed.
    Answered,
    /// The run ended normally without a parseable answer.
    Unanswered,
    /// An endpoint failed after retries.
    Failed,
}

impl RunStatus {
    pub fn is_complete(self) -> bool {
        !matches!(self, RunStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart {
        tokenizer_id: String,
        model: String,
        reasoning_effort: ReasoningEffort,
        max_output_tokens: u32,
        max_context_tokens: usize,
        max_search_calls: usize,
        rerank_depth: usize,
        handoff_k: usize,
    },
    LlmCall {
        stage: Stage,
        call_seq: u64,
        input_total: u64,
        input_cached: u64,
        output_total: u64,
        output_reasoning: u64,
        estimated: bool,
        reasoning_effort: ReasoningEffort,
        retries: u32,
        tool_calls: usize,
    },
    ToolCall {
        call_id: String,
        name: String,
        query: String,
    },
    RerankWindow {
        call_id: String,
        start: usize,
        end: usize,
        order: Vec<usize>,
        repair_applied: bool,
        fallback: bool,
        prompt_tokens: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        usage: Option<UsageRecord>,
        retries: u32,
    },
    ToolResult {
        call_id: String,
        docids: Vec<String>,
        token_counts: Vec<usize>,
    },
    ContextTruncated {
        dropped_messages: usize,
        tokens_before: usize,
        tokens_after: usize,
        budget: usize,
    },
    Flag {
        flag: String,
    },
    Final {
        explanation: String,
        exact_answer: String,
        confidence: f64,
        response: String,
    },
    RunEnd {
        status: RunStatus,
        search_calls: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    qid: String,
    seq: usize,
    #[serde(flatten)]
    event: TraceEvent,
}

/// Complete log of one agent run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub qid: String,
    pub events: Vec<TraceEvent>,
    pub search_calls: usize,
    pub retrieved_docids_union: BTreeSet<String>,
    pub final_answer: Option<FinalAnswer>,
    pub flags: Vec<String>,
    pub status: RunStatus,
}

impl RunTrace {
    fn new(qid: &str) -> Self {
        Self {
            qid: qid.to_string(),
            events: Vec::new(),
            search_calls: 0,
            retrieved_docids_union: BTreeSet::new(),
            final_answer: None,
            flags: Vec::new(),
            status: RunStatus::Unanswered,
        }
    }

    /// Appends an event and updates the derived summary fields.
    fn push(&mut self, event: TraceEvent) {
        match &event {
            TraceEvent::ToolCall { .. } => self.search_calls += 1,
            TraceEvent::ToolResult { docids, .. } => {
                self.retrieved_docids_union.extend(docids.iter().cloned());
            }
            TraceEvent::Flag { flag } => self.flags.push(flag.clone()),
            TraceEvent::Final {
                explanation,
                exact_answer,
                confidence,
                response,
            } => {
                self.final_answer = Some(FinalAnswer {
                    explanation: explanation.clone(),
                    exact_answer: exact_answer.clone(),
                    confidence: *confidence,
                    response: response.clone(),
                });
            }
            TraceEvent::RunEnd { status, .. } => self.status = *status,
            _ => {}
        }
        self.events.push(event);
    }

    fn flag(&mut self, flag: impl Into<String>) {
        self.push(TraceEvent::Flag { flag: flag.into() });
    }

    fn finish(&mut self, status: RunStatus) {
        let search_calls = self.search_calls;
        self.push(TraceEvent::RunEnd {
            status,
            search_calls,
        });
    }

    /// Usage records of every chat call logged in this trace, in call order.
    pub fn usage_records(&self) -> Vec<UsageRecord> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::LlmCall {
                    stage,
                    call_seq,
                    input_total,
                    input_cached,
                    output_total,
                    output_reasoning,
                    estimated,
                    ..
                } => Some(UsageRecord {
                    qid: self.qid.clone(),
                    stage: *stage,
                    call_seq: *call_seq,
                    input_total: *input_total,
                    input_cached: *input_cached,
                    output_total: *output_total,
                    output_reasoning: *output_reasoning,
                    estimated: *estimated,
                }),
                TraceEvent::RerankWindow { usage, .. } => usage.clone(),
                _ => None,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (seq, event) in self.events.iter().enumerate() {
            let line = TraceLine {
                qid: self.qid.clone(),
                seq,
                event: event.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a trace by replaying its JSONL events.
    pub fn from_jsonl(text: &str) -> Result<Self, AgentError> {
        let mut trace: Option<RunTrace> = None;
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let err = |message: String| AgentError::Trace {
                line: idx + 1,
                message,
            };
            let line: TraceLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            let t = trace.get_or_insert_with(|| RunTrace::new(&line.qid));
            if line.qid != t.qid {
                return Err(err(format!("qid {:?} differs from {:?}", line.qid, t.qid)));
            }
            if line.seq != t.events.len() {
                return Err(err(format!("expected seq {}, got {}", t.events.len(), line.seq)));
            }
            t.push(line.event);
        }
        let trace = trace.ok_or_else(|| AgentError::Trace {
            line: 0,
            message: "empty trace".into(),
        })?;
        if !matches!(trace.events.last(), Some(TraceEvent::RunEnd { .. })) {
            return Err(AgentError::Trace {
                line: trace.events.len(),
                message: "trace has no run_end event".into(),
            });
        }
        Ok(trace)
    }

    /// Hex SHA-256 of the JSONL serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

// --- the loop --------------------------------------------------------------

#[derive(Serialize)]
struct ToolDoc<'a> {
    docid: &'a str,
    text: &'a str,
}

fn tool_error(message: &str) -> String {
    json!({ "error": message }).to_string()
}

fn query_argument(call: &ToolCall) -> Result<String, String> {
    if call.name != SEARCH_TOOL {
        return Err(format!("unknown tool {:?}", call.name));
    }
    let args: Value = serde_json::from_str(&call.arguments).map_err(|e| format!("arguments are not JSON: {e}"))?;
    match args.get("query").and_then(Value::as_str) {
        Some(q) if !q.trim().is_empty() => Ok(q.to_string()),
        Some(_) => Err("query is empty".into()),
        None => Err("missing string argument \"query\"".into()),
    }
}

/// A configured search agent. Runs share only immutable state and the ledger.
pub struct Agent {
    config: AgentConfig,
    llm: Arc<dyn ChatEndpoint>,
    retriever: Arc<dyn Retriever>,
    reranker: Option<ListwiseReranker>,
    corpus: Arc<CorpusStore>,
}

impl Agent {
    /// `rerank_endpoint` is required when `config.rerank.depth > 0`.
    pub fn new(config: AgentConfig, llm: Arc<dyn ChatEndpoint>, retriever: Arc<dyn Retriever>, rerank_endpoint: Option<Arc<dyn ChatEndpoint>>, corpus: Arc<CorpusStore>) -> Result<Self, AgentError> {
        config.validate()?;
        let reranker = if config.rerank.enabled() {
            let endpoint = rerank_endpoint.ok_or(AgentError::MissingReranker(config.rerank.depth))?;
            Some(ListwiseReranker::new(endpoint, config.rerank.clone())?)
        } else {
            None
        };
        Ok(Self {
            config,
            llm,
            retriever,
            reranker,
            corpus,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Runs one query to completion. Search-stage and rerank-stage usage is
    /// appended to `ledger`; failures end up in the trace, never as an `Err`.
    pub fn run(&self, task: &QueryTask, ledger: &Ledger) -> RunTrace {
        let mut trace = RunTrace::new(&task.qid);
        trace.push(TraceEvent::RunStart {
            tokenizer_id: self.corpus.tokenizer_id().to_string(),
            model: self.config.model.clone(),
            reasoning_effort: self.config.reasoning_effort,
            max_output_tokens: self.config.output_budget(),
            max_context_tokens: self.config.max_context_tokens,
            max_search_calls: self.config.max_search_calls,
            rerank_depth: self.config.rerank.depth,
            handoff_k: self.config.handoff_k,
        });
        let prompt = match build_search_prompt(&task.question) {
            Ok(p) => p,
            Err(e) => {
                trace.flag(format!("invalid_task:{e}"));
                trace.finish(RunStatus::Failed);
                return trace;
            }
        };
        let mut history = vec![ChatMessage::user(prompt)];
        let status = self.drive(task, &mut history, &mut trace, ledger);
        trace.finish(status);
        trace
    }

    fn drive(&self, task: &QueryTask, history: &mut Vec<ChatMessage>, trace: &mut RunTrace, ledger: &Ledger) -> RunStatus {
        let tokenizer = self.corpus.tokenizer().as_ref();
        let budget = self.config.prompt_budget();
        let ctx = CallContext {
            qid: &task.qid,
            stage: Stage::Search,
        };
        loop {
            match enforce_context(history, budget, tokenizer) {
                Ok(out) => {
                    if out.dropped_messages > 0 {
                        trace.push(TraceEvent::ContextTruncated {
                            dropped_messages: out.dropped_messages,
                            tokens_before: out.tokens_before,
                            tokens_after: out.tokens_after,
                            budget,
                        });
                        *history = out.messages;
                    }
                }
                Err(e) => {
                    log::warn!("{}: {e}", task.qid);
                    trace.flag("context_exhausted");
                    return RunStatus::Unanswered;
                }
            }
            let mut request = ChatRequest::new(self.config.model.clone(), history.clone(), self.config.output_budget());
            request.tools = vec![search_tool()];
            request.reasoning_effort = Some(self.config.reasoning_effort);
            let out = match chat(self.llm.as_ref(), &request, ctx, ledger) {
                Ok(out) => out,
                Err(e) => {
                    log::warn!("{}: search model call failed: {e}", task.qid);
                    trace.flag(format!("llm_error:{e}"));
                    return RunStatus::Failed;
                }
            };
            let r = &out.record;
            trace.push(TraceEvent::LlmCall {
                stage: r.stage,
                call_seq: r.call_seq,
                input_total: r.input_total,
                input_cached: r.input_cached,
                output_total: r.output_total,
                output_reasoning: r.output_reasoning,
                estimated: r.estimated,
                reasoning_effort: self.config.reasoning_effort,
                retries: out.retries,
                tool_calls: out.message.tool_calls.len(),
            });
            let message = out.message;
            if message.tool_calls.is_empty() {
                return match parse_final_answer(&message.content) {
                    Ok(parsed) => {
                        for f in parsed.flags {
                            trace.flag(f);
                        }
                        let a = parsed.answer;
                        trace.push(TraceEvent::Final {
                            explanation: a.explanation,
                            exact_answer: a.exact_answer,
                            confidence: a.confidence,
                            response: a.response,
                        });
                        RunStatus::Answered
                    }
                    Err(e) => {
                        trace.flag(format!("final_answer_unparsed:{e}"));
                        RunStatus::Unanswered
                    }
                };
            }
            let calls = message.tool_calls.clone();
            history.push(ChatMessage::assistant_tool_calls(message.content, calls.clone()));
            for call in &calls {
                if trace.search_calls >= self.config.max_search_calls {
                    trace.flag("max_search_calls_reached");
                    return RunStatus::Unanswered;
                }
                if let Err(status) = self.execute(task, call, history, trace, ledger) {
                    return status;
                }
            }
        }
    }

    /// Runs one tool call and appends its tool message to `history`.
    fn execute(&self, task: &QueryTask, call: &ToolCall, history: &mut Vec<ChatMessage>, trace: &mut RunTrace, ledger: &Ledger) -> Result<(), RunStatus> {
        let query = query_argument(call);
        trace.push(TraceEvent::ToolCall {
            call_id: call.id.clone(),
            name: call.name.clone(),
            query: query.as_deref().unwrap_or("").to_string(),
        });
        let empty_result = |trace: &mut RunTrace, history: &mut Vec<ChatMessage>, message: &str| {
            trace.push(TraceEvent::ToolResult {
                call_id: call.id.clone(),
                docids: Vec::new(),
                token_counts: Vec::new(),
            });
            history.push(ChatMessage::tool(call.id.clone(), tool_error(message)));
        };
        let query = match query {
            Ok(q) => q,
            Err(message) => {
                trace.flag(format!("invalid_tool_call:{}", call.id));
                empty_result(trace, history, &message);
                return Ok(());
            }
        };
        let ranked = match self
            .retriever
            .retrieve(&task.qid, &query, self.config.retrieval_depth())
        {
            Ok(r) => r,
            Err(e) => {
                trace.flag(format!("retrieval_error:{}:{e}", call.id));
                empty_result(trace, history, &e.to_string());
                return Ok(());
            }
        };
        let ranked = match &self.reranker {
            Some(reranker) if !ranked.is_empty() => {
                let outcome = match reranker.sliding_window_rerank(&query, &ranked, &self.corpus, ledger) {
                    Ok(o) => o,
                    Err(e) => {
                        trace.flag(format!("rerank_error:{}:{e}", call.id));
                        return Err(RunStatus::Failed);
                    }
                };
                for w in &outcome.windows {
                    trace.push(TraceEvent::RerankWindow {
                        call_id: call.id.clone(),
                        start: w.start,
                        end: w.end,
                        order: w.order.clone(),
                        repair_applied: w.repair_applied,
                        fallback: w.fallback,
                        prompt_tokens: w.prompt_tokens,
                        usage: w.usage.clone(),
                        retries: w.retries,
                    });
                }
                for f in outcome.flags() {
                    trace.flag(format!("{f}:{}", call.id));
                }
                outcome.list
            }
            _ => ranked,
        };
        let top = handoff_topk(&ranked, self.config.handoff_k);
        let mut docs = Vec::new();
        let mut docids = Vec::new();
        let mut token_counts = Vec::new();
        for entry in top.entries() {
            let text = match self
                .corpus
                .truncated_text(&entry.docid, self.config.candidate_token_limit)
            {
                Ok(t) => t,
                Err(e) => {
                    trace.flag(format!("unknown_docid:{}:{e}", entry.docid));
                    continue;
                }
            };
            docids.push(entry.docid.clone());
            token_counts.push(self.corpus.count_tokens(text));
            docs.push(ToolDoc {
                docid: &entry.docid,
                text,
            });
        }
        let content = serde_json::to_string(&docs).expect("documents serialize");
        trace.push(TraceEvent::ToolResult {
            call_id: call.id.clone(),
            docids,
            token_counts,
        });
        history.push(ChatMessage::tool(call.id.clone(), content));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WhitespaceTokenizer;

    #[test]
    fn prompt_interpolates_question() {
        let p = build_search_prompt("Q?").unwrap();
        assert!(p.contains("\n\nQuestion: Q?\n\n"));
        assert!(p.contains("\nExact Answer: {your succinct, final answer}\n"));
        assert!(p.ends_with("Confidence: {your confidence score between 0% and 100% for your answer}"));
        assert!(matches!(build_search_prompt("  "), Err(AgentError::EmptyQuestion)));
    }

    #[test]
    fn final_answer_basic() {
        let p = parse_final_answer("Explanation: because [d3].\nExact Answer: Paris\nConfidence: 80%").unwrap();
        assert_eq!(p.answer.explanation, "because [d3].");
        assert_eq!(p.answer.exact_answer, "Paris");
        assert!((p.answer.confidence - 0.8).abs() < 1e-12);
        assert!(p.flags.is_empty());
    }

    #[test]
    fn final_answer_missing_confidence() {
        let p = parse_final_answer("exact answer: 42").unwrap();
        assert_eq!(p.answer.confidence, 1.0);
        assert_eq!(p.flags, vec!["confidence_missing"]);
    }

    #[test]
    fn final_answer_clamps() {
        let p = parse_final_answer("Exact Answer: x\nConfidence: 150%").unwrap();
        assert_eq!(p.answer.confidence, 1.0);
        assert_eq!(p.flags, vec!["confidence_clamped"]);
    }

    #[test]
    fn final_answer_last_wins_and_markdown() {
        let text = "Exact Answer: draft\n**Explanation:** first line\nsecond line [d1].\n**Exact Answer:** Final\n**Confidence:** 0.35";
        let p = parse_final_answer(text).unwrap();
        assert_eq!(p.answer.exact_answer, "Final");
        assert_eq!(p.answer.explanation, "first line\nsecond line [d1].");
        assert!((p.answer.confidence - 0.35).abs() < 1e-12);
    }

    #[test]
    fn final_answer_requires_exact() {
        assert_eq!(parse_final_answer("Explanation: none").unwrap_err(), AnswerParseError::MissingExactAnswer);
        assert_eq!(parse_final_answer("Exact Answer:   \nConfidence: 3%").unwrap_err(), AnswerParseError::EmptyExactAnswer);
    }

    fn words(n: usize) -> String {
        vec!["w"; n].join(" ")
    }

    fn pair(id: &str, n: usize) -> [ChatMessage; 2] {
        [
            ChatMessage::assistant_tool_calls(
                "",
                vec![ToolCall {
                    id: id.into(),
                    name: "search".into(),
                    arguments: String::new(),
                }],
            ),
            ChatMessage::tool(id, words(n)),
        ]
    }

    #[test]
    fn context_under_budget_unchanged() {
        let mut h = vec![ChatMessage::user(words(10))];
        h.extend(pair("a", 10));
        let out = enforce_context(&h, 1000, &WhitespaceTokenizer).unwrap();
        assert_eq!(out.messages, h);
        assert_eq!(out.dropped_messages, 0);
    }

    #[test]
    fn context_drops_oldest_pair() {
        // 10 + (1 + 30) * 3 = 103 tokens; about 10% over a 94-token budget.
        let mut h = vec![ChatMessage::user(words(10))];
        h.extend(pair("a", 30));
        h.extend(pair("b", 30));
        h.extend(pair("c", 30));
        assert_eq!(history_tokens(&h, &WhitespaceTokenizer), 103);
        let out = enforce_context(&h, 94, &WhitespaceTokenizer).unwrap();
        assert_eq!(out.dropped_messages, 2);
        assert_eq!(out.tokens_after, 72);
        assert_eq!(out.messages[0], h[0]);
        assert_eq!(out.messages[1..], h[3..]);
    }

    #[test]
    fn context_exhausted_when_pinned_too_big() {
        let h = vec![ChatMessage::system(words(50)), ChatMessage::user(words(10))];
        let err = enforce_context(&h, 40, &WhitespaceTokenizer).unwrap_err();
        assert_eq!(err.required, 60);
    }

    #[test]
    fn config_budgets() {
        let c = AgentConfig::default();
        assert_eq!(c.output_budget(), 2048);
        assert_eq!(c.prompt_budget(), 131_072 - 2048);
        assert_eq!(c.retrieval_depth(), 5);
        let c = AgentConfig {
            reasoning_effort: ReasoningEffort::High,
            rerank: RerankConfig::with_depth(50),
            ..AgentConfig::default()
        };
        assert_eq!(c.output_budget(), 16384);
        assert_eq!(c.retrieval_depth(), 50);
    }
}
