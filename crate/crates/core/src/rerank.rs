//! Zero-shot listwise reranking with a sliding window.
//!
//! A list longer than the window is reranked from the back toward the front:
//! each window is reordered by the model and written back in place, then the
//! window moves `stride` positions toward the head. The last window always covers
//! the first `window` positions. With `stride <= window`, the best `window - stride`
//! items of the whole list finish at the head in model order.

use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::corpus::{CorpusStore, CANDIDATE_TOKEN_LIMIT};
use crate::ledger::Ledger;
use crate::llm::{chat, CallContext, ChatEndpoint, ChatMessage, ChatRequest, ReasoningEffort, Stage, UsageRecord};
use crate::retrieval::{RankedList, ScoredDoc};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("stride {stride} must be between 1 and the window size {window}")]
    InvalidStride { window: usize, stride: usize },
    #[error("window size must be positive")]
    ZeroWindow,
    #[error("handoff k must be positive")]
    ZeroHandoff,
    #[error("handoff k {handoff} exceeds rerank depth {depth}")]
    HandoffExceedsDepth { handoff: usize, depth: usize },
    #[error("{0:?} is not a permutation of 1..n")]
    NotAPermutation(Vec<usize>),
    #[error("window holds {got} candidates, more than the window size {window}")]
    WindowOverflow { window: usize, got: usize },
    #[error("reranking is disabled (depth 0)")]
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    /// Candidates reranked per search call; 0 disables reranking.
    pub depth: usize,
    pub window: usize,
    pub stride: usize,
    pub handoff_k: usize,
    pub max_context: usize,
    pub reasoning_effort: ReasoningEffort,
    /// Overrides the effort's default output budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    pub model: String,
    /// Tokens kept per candidate before it enters the prompt.
    pub candidate_token_limit: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            depth: 0,
            window: 20,
            stride: 10,
            handoff_k: 5,
            max_context: 32768,
            reasoning_effort: ReasoningEffort::Low,
            max_output_tokens: None,
            model: "reranker".into(),
            candidate_token_limit: CANDIDATE_TOKEN_LIMIT,
        }
    }
}

impl RerankConfig {
    pub fn with_depth(depth: usize) -> Self {
        Self {
            depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.window == 0 {
            return Err(RerankError::ZeroWindow);
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(RerankError::InvalidStride {
                window: self.window,
                stride: self.stride,
            });
        }
        if self.handoff_k == 0 {
            return Err(RerankError::ZeroHandoff);
        }
        if self.depth > 0 && self.handoff_k > self.depth {
            return Err(RerankError::HandoffExceedsDepth {
                handoff: self.handoff_k,
                depth: self.depth,
            });
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.depth > 0
    }

    pub fn output_budget(&self) -> u32 {
        self.max_output_tokens
            .unwrap_or_else(|| self.reasoning_effort.max_output_tokens())
    }
}

/// A reordering of `n` items as 1-based positions, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, RerankError> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i == 0 || i > n || std::mem::replace(&mut seen[i - 1], true) {
                return Err(RerankError::NotAPermutation(order));
            }
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (1..=n).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &v)| v == i + 1)
    }

    /// Items reordered by this permutation.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.order.len(), "permutation length mismatch");
        self.order.iter().map(|&i| items[i - 1].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPermutation {
    pub permutation: Permutation,
    /// The raw text was not already a clean permutation of 1..n.
    pub repair_applied: bool,
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*(\d+)\s*\]").expect("valid regex"))
}

/// Extracts a permutation of 1..n from free text such as `"[2] > [1]"`.
///
/// Bracketed integers are read left to right; out-of-range ids are dropped, only
/// the first occurrence of each id is kept, and missing ids are appended ascending.
pub fn parse_permutation(text: &str, n: usize) -> ParsedPermutation {
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut dirty = false;
    for cap in bracket_re().captures_iter(text) {
        match cap[1].parse::<usize>() {
            Ok(id) if (1..=n).contains(&id) => {
                if seen[id - 1] {
                    dirty = true;
                } else {
                    seen[id - 1] = true;
                    order.push(id);
                }
            }
            _ => dirty = true,
        }
    }
    if order.len() < n {
        dirty = true;
        order.extend((1..=n).filter(|&id| !seen[id - 1]));
    }
    ParsedPermutation {
        permutation: Permutation { order },
        repair_applied: dirty,
    }
}

/// The listwise prompt for one window of candidates.
pub fn build_rerank_prompt(query: &str, candidates: &[&str]) -> String {
    let num = candidates.len();
    let mut out = String::new();
    out.push_str(
        "You are RankLLM, an intelligent assistant that can rank passages based on their relevance to the query. \
         Given a query and a passage list, you first think about the reasoning process in mind and then provide \
         the answer (i.e., the reranked passage list). Do not include any other text in your response.\n\n",
    );
    out.push_str(&format!(
        "I will provide you with {num} passages, each indicated by a numerical identifier []. \
         Rank the passages based on their relevance to the search query: {query}.\n\n"
    ));
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!("[{}] {}\n", i + 1, c));
    }
    out.push_str(&format!(
        "\nSearch Query: {query}.\n\
         Rank the {num} passages above based on their relevance to the search query. \
         All passages should be included and listed using identifiers, in descending order of relevance. \
         The format of the answer should be [] > [], e.g., [2] > [1]."
    ));
    out
}

/// Half-open `(start, end)` spans in processing order (back to front).
pub fn window_spans(n: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    assert!(window > 0 && stride > 0, "window and stride must be positive");
    if n == 0 {
        return Vec::new();
    }
    if n <= window {
        return vec![(0, n)];
    }
    let mut spans = Vec::new();
    let mut start = n - window;
    while start > 0 {
        spans.push((start, start + window));
        start = start.saturating_sub(stride);
    }
    spans.push((0, window));
    spans
}

/// Expected number of window calls for a list of `n` items.
pub fn window_call_count(n: usize, window: usize, stride: usize) -> usize {
    match n {
        0 => 0,
        n if n <= window => 1,
        n => 1 + (n - window).div_ceil(stride),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub start: usize,
    pub end: usize,
    pub order: Vec<usize>,
    pub repair_applied: bool,
    /// The call failed and the window kept its input order.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub prompt_tokens: usize,
    pub context_exceeded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<UsageRecord>,
    pub retries: u32,
}

#[derive(Debug, Clone)]
pub struct RerankOutcome {
    pub list: RankedList,
    pub windows: Vec<WindowOutcome>,
}

impl RerankOutcome {
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        for w in &self.windows {
            let span = format!("{}..{}", w.start + 1, w.end);
            if w.fallback {
                flags.push(format!("rerank_fallback:{span}"));
            }
            if w.repair_applied {
                flags.push(format!("rerank_repair:{span}"));
            }
            if w.context_exceeded {
                flags.push(format!("rerank_context_exceeded:{span}"));
            }
        }
        flags
    }
}

/// Listwise reranker bound to a chat endpoint.
pub struct ListwiseReranker {
    endpoint: Arc<dyn ChatEndpoint>,
    config: RerankConfig,
}

impl ListwiseReranker {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, config: RerankConfig) -> Result<Self, RerankError> {
        config.validate()?;
        Ok(Self { endpoint, config })
    }

    pub fn config(&self) -> &RerankConfig {
        &self.config
    }

    /// One chat call reordering `candidates`; failures fall back to identity.
    pub fn rerank_window(&self, qid: &str, query: &str, candidates: &[&str], ledger: &Ledger, tokens: impl Fn(&str) -> usize) -> Result<WindowOutcome, RerankError> {
        if candidates.len() > self.config.window {
            return Err(RerankError::WindowOverflow {
                window: self.config.window,
                got: candidates.len(),
            });
        }
        let n = candidates.len();
        let prompt = build_rerank_prompt(query, candidates);
        let prompt_tokens = tokens(&prompt);
        let mut request = ChatRequest::new(
            self.config.model.clone(),
            vec![ChatMessage::user(prompt)],
            self.config.output_budget(),
        );
        request.reasoning_effort = Some(self.config.reasoning_effort);
        let ctx = CallContext {
            qid,
            stage: Stage::Rerank,
        };
        let base = WindowOutcome {
            start: 0,
            end: n,
            order: Vec::new(),
            repair_applied: false,
            fallback: false,
            error: None,
            prompt_tokens,
            context_exceeded: prompt_tokens > self.config.max_context,
            usage: None,
            retries: 0,
        };
        Ok(match chat(self.endpoint.as_ref(), &request, ctx, ledger) {
            Ok(out) => {
                let parsed = parse_permutation(&out.message.content, n);
                WindowOutcome {
                    order: parsed.permutation.order,
                    repair_applied: parsed.repair_applied,
                    usage: Some(out.record),
                    retries: out.retries,
                    ..base
                }
            }
            Err(e) => {
                log::warn!("rerank window failed for {qid}: {e}");
                WindowOutcome {
                    order: Permutation::identity(n).order,
                    fallback: true,
                    error: Some(e.to_string()),
                    ..base
                }
            }
        })
    }

    /// Reranks `ranked` (at most `depth` entries) with back-to-front windows.
    ///
    /// The output holds the same docids; scores become `1/rank`.
    pub fn sliding_window_rerank(&self, query: &str, ranked: &RankedList, corpus: &CorpusStore, ledger: &Ledger) -> Result<RerankOutcome, RerankError> {
        if !self.config.enabled() {
            return Err(RerankError::Disabled);
        }
        let mut docids: Vec<String> = ranked
            .entries()
            .iter()
            .take(self.config.depth)
            .map(|e| e.docid.clone())
            .collect();
        let texts: std::collections::HashMap<String, String> = docids
            .iter()
            .map(|d| {
                let text = corpus
                    .truncated_text(d, self.config.candidate_token_limit)
                    .unwrap_or("")
                    .to_string();
                (d.clone(), text)
            })
            .collect();
        let mut windows = Vec::new();
        for (start, end) in window_spans(docids.len(), self.config.window, self.config.stride) {
            let slice: Vec<&str> = docids[start..end].iter().map(|d| texts[d].as_str()).collect();
            let mut outcome = self.rerank_window(&ranked.qid, query, &slice, ledger, |t| corpus.count_tokens(t))?;
            let perm = Permutation::new(outcome.order.clone())?;
            let reordered = perm.apply(&docids[start..end]);
            docids[start..end].clone_from_slice(&reordered);
            outcome.start = start;
            outcome.end = end;
            windows.push(outcome);
        }
        Ok(RerankOutcome {
            list: rank_scored(&ranked.qid, docids),
            windows,
        })
    }
}

/// Ranked list with surrogate scores `1/rank`.
pub fn rank_scored(qid: &str, docids: Vec<String>) -> RankedList {
    let entries = docids
        .into_iter()
        .enumerate()
        .map(|(i, docid)| ScoredDoc {
            docid,
            score: 1.0 / (i + 1) as f64,
        })
        .collect();
    RankedList::from_sorted(qid, entries)
}

/// The first `k` entries handed to the agent.
pub fn handoff_topk(ranked: &RankedList, k: usize) -> RankedList {
    ranked.prefix(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_clean() {
        let p = parse_permutation("[2] > [1]", 2);
        assert_eq!(p.permutation.order(), &[2, 1]);
        assert!(!p.repair_applied);
    }

    #[test]
    fn parse_duplicate_keeps_first() {
        let p = parse_permutation("[1] > [2] > [1]", 2);
        assert_eq!(p.permutation.order(), &[1, 2]);
        assert!(p.repair_applied);
    }

    #[test]
    fn parse_appends_missing() {
        let p = parse_permutation("[3] > [1]", 3);
        assert_eq!(p.permutation.order(), &[3, 1, 2]);
        assert!(p.repair_applied);
    }

    #[test]
    fn parse_garbage_is_identity() {
        let p = parse_permutation("hello", 3);
        assert_eq!(p.permutation.order(), &[1, 2, 3]);
        assert!(p.repair_applied);
        let p = parse_permutation("[0] [99999999999999999999999] [4]", 3);
        assert_eq!(p.permutation.order(), &[1, 2, 3]);
        assert!(p.repair_applied);
    }

    #[test]
    fn prompt_counts() {
        let p = build_rerank_prompt("q", &["alpha", "beta"]);
        assert!(p.contains("I will provide you with 2 passages"));
        assert!(p.contains("[1] alpha\n[2] beta\n"));
        assert!(p.contains("Rank the 2 passages above"));
        assert_eq!(p.matches("search query: q.").count(), 1);
        assert!(p.contains("Search Query: q."));
        let single = build_rerank_prompt("q", &["only"]);
        assert!(single.contains("with 1 passages"));
        assert!(single.contains("[1] only\n"));
        assert!(!single.contains("\n[2] "));
    }

    #[test]
    fn spans_for_depth_50() {
        assert_eq!(window_spans(50, 20, 10), vec![(30, 50), (20, 40), (10, 30), (0, 20)]);
        assert_eq!(window_spans(10, 20, 10), vec![(0, 10)]);
        assert_eq!(window_spans(25, 20, 10), vec![(5, 25), (0, 20)]);
        assert!(window_spans(0, 20, 10).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(RerankConfig::with_depth(50).validate().is_ok());
        let bad = RerankConfig {
            stride: 30,
            ..RerankConfig::with_depth(50)
        };
        assert!(bad.validate().is_err());
        let bad = RerankConfig {
            handoff_k: 20,
            ..RerankConfig::with_depth(10)
        };
        assert!(bad.validate().is_err());
        assert!(RerankConfig::with_depth(0).validate().is_ok());
    }

    #[test]
    fn permutation_checks() {
        assert!(Permutation::new(vec![2, 1, 3]).is_ok());
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
        assert_eq!(Permutation::new(vec![2, 3, 1]).unwrap().apply(&["a", "b", "c"]), vec!["b", "c", "a"]);
    }

    #[test]
    fn handoff_prefix() {
        let list = rank_scored("q", (0..50).map(|i| format!("d{i}")).collect());
        assert_eq!(handoff_topk(&list, 5).docids(), vec!["d0", "d1", "d2", "d3", "d4"]);
        let short = rank_scored("q", vec!["a".into(), "b".into(), "c".into()]);
        assert_eq!(handoff_topk(&short, 5).len(), 3);
    }
}
