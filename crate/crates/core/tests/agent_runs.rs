use std::collections::BTreeSet;
use std::sync::Arc;

use deepsearch_core::agent::{Agent, AgentConfig, RunStatus, RunTrace, TraceEvent};
use deepsearch_core::corpus::{CorpusStore, WhitespaceTokenizer};
use deepsearch_core::eval::QueryTask;
use deepsearch_core::ledger::{aggregate, Ledger};
use deepsearch_core::llm::{ChatEndpoint, MockScript, ScriptedMock, Stage};
use deepsearch_core::rerank::RerankConfig;
use deepsearch_core::retrieval::{lexical_topk, LexicalRetriever};
use serde_json::json;

fn corpus() -> Arc<CorpusStore> {
    let mut docs = Vec::new();
    for i in 0..40 {
        let topic = ["river", "mountain", "desert", "forest"][i % 4];
        let long = if i == 7 { " pad".repeat(900) } else { String::new() };
        docs.push((format!("d{i:02}"), format!("{topic} document number {i} about the {topic}{long}")));
    }
    Arc::new(CorpusStore::from_pairs(Arc::new(WhitespaceTokenizer), docs).unwrap())
}

fn task(qid: &str) -> QueryTask {
    QueryTask {
        qid: qid.into(),
        question: format!("Question for {qid}?"),
        answer: "x".into(),
        evidence_docids: BTreeSet::new(),
        gold_docids: BTreeSet::new(),
    }
}

fn search(query: &str, usage: (u64, u64, u64, u64)) -> serde_json::Value {
    json!({
        "reply": {"tool_calls": [{"name": "search", "arguments": {"query": query}}]},
        "usage": {"input": usage.0, "cached": usage.1, "output": usage.2, "reasoning": usage.3}
    })
}

fn answer(text: &str, usage: (u64, u64, u64, u64)) -> serde_json::Value {
    json!({
        "reply": {"content": text},
        "usage": {"input": usage.0, "cached": usage.1, "output": usage.2, "reasoning": usage.3}
    })
}

fn mock(lines: &[serde_json::Value]) -> Arc<dyn ChatEndpoint> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    Arc::new(ScriptedMock::new(MockScript::parse(&text).unwrap()))
}

fn agent_with(config: AgentConfig, llm: Arc<dyn ChatEndpoint>, reranker: Option<Arc<dyn ChatEndpoint>>) -> Agent {
    let corpus = corpus();
    let retriever = Arc::new(LexicalRetriever::new(&corpus));
    Agent::new(config, llm, retriever, reranker, corpus).unwrap()
}

const FINAL: &str = "Explanation: found it [d01].\nExact Answer: the river\nConfidence: 70%";

fn check_invariants(trace: &RunTrace) {
    let calls = trace.events.iter().filter(|e| matches!(e, TraceEvent::ToolCall { .. })).count();
    let results: Vec<&TraceEvent> = trace.events.iter().filter(|e| matches!(e, TraceEvent::ToolResult { .. })).collect();
    assert_eq!(trace.search_calls, calls);
    assert_eq!(calls, results.len());
    let mut union = BTreeSet::new();
    let mut pending: Option<String> = None;
    for e in &trace.events {
        match e {
            TraceEvent::ToolCall { call_id, .. } => {
                assert!(pending.is_none(), "tool call before previous result");
                pending = Some(call_id.clone());
            }
            TraceEvent::ToolResult { call_id, docids, token_counts } => {
                assert_eq!(pending.take().as_ref(), Some(call_id));
                assert!(docids.len() <= 5);
                assert_eq!(docids.len(), token_counts.len());
                assert!(token_counts.iter().all(|&t| t <= 512));
                let before = union.len();
                union.extend(docids.iter().cloned());
                assert!(union.len() >= before);
            }
            _ => {}
        }
    }
    assert_eq!(union, trace.retrieved_docids_union);
    assert!(matches!(trace.events.last(), Some(TraceEvent::RunEnd { .. })));
}

#[test]
fn one_search_then_answer() {
    let llm = mock(&[search("x river", (100, 0, 20, 10)), answer(FINAL, (400, 100, 50, 30))]);
    let agent = agent_with(AgentConfig::default(), llm, None);
    let ledger = Ledger::new();
    let trace = agent.run(&task("q1"), &ledger);
    check_invariants(&trace);
    assert_eq!(trace.status, RunStatus::Answered);
    assert_eq!(trace.search_calls, 1);
    let fa = trace.final_answer.as_ref().unwrap();
    assert_eq!(fa.exact_answer, "the river");
    assert!((fa.confidence - 0.7).abs() < 1e-12);
    assert_eq!(fa.explanation, "found it [d01].");
    assert!(matches!(&trace.events[2], TraceEvent::ToolCall { query, .. } if query == "x river"));

    let totals = aggregate(&ledger.records(), |r| r.stage == Stage::Search);
    assert_eq!((totals.input_noncached, totals.input_cached, totals.output_total, totals.output_reasoning), (400, 100, 70, 40));
    assert_eq!(trace.usage_records(), ledger.records());
}

#[test]
fn immediate_answer_has_no_searches() {
    let agent = agent_with(AgentConfig::default(), mock(&[answer(FINAL, (10, 0, 5, 0))]), None);
    let trace = agent.run(&task("q0"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.search_calls, 0);
    assert!(trace.retrieved_docids_union.is_empty());
    assert_eq!(trace.status, RunStatus::Answered);
}

#[test]
fn three_searches_union_matches_retriever_oracle() {
    let queries = ["river", "mountain document", "desert 9"];
    let mut script: Vec<_> = queries.iter().map(|q| search(q, (10, 0, 1, 0))).collect();
    script.push(answer(FINAL, (10, 0, 1, 0)));
    let agent = agent_with(AgentConfig::default(), mock(&script), None);
    let trace = agent.run(&task("q3"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.search_calls, 3);
    let c = corpus();
    let mut want = BTreeSet::new();
    for q in queries {
        for d in lexical_topk(&c, "q3", q, 5).unwrap().docids() {
            want.insert(d.to_string());
        }
    }
    assert_eq!(trace.retrieved_docids_union, want);
}

#[test]
fn traces_are_deterministic_and_replayable() {
    let script = [search("river", (10, 2, 3, 1)), search("forest", (20, 5, 3, 1)), answer(FINAL, (30, 9, 4, 2))];
    let run = || agent_with(AgentConfig::default(), mock(&script), None).run(&task("qd"), &Ledger::new());
    let (a, b) = (run(), run());
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.digest(), b.digest());
    let back = RunTrace::from_jsonl(&a.to_jsonl()).unwrap();
    assert_eq!(back, a);
    for (seq, line) in a.to_jsonl().lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["qid"], "qd");
        assert_eq!(v["seq"], seq);
        assert!(v["type"].is_string());
    }
}

#[test]
fn long_documents_are_truncated_in_tool_results() {
    let llm = mock(&[search("number 7 river pad", (1, 0, 1, 0)), answer(FINAL, (1, 0, 1, 0))]);
    let trace = agent_with(AgentConfig::default(), llm, None).run(&task("qt"), &Ledger::new());
    check_invariants(&trace);
    let counts: Vec<usize> = trace
        .events
        .iter()
        .find_map(|e| match e {
            TraceEvent::ToolResult { docids, token_counts, .. } if docids.contains(&"d07".to_string()) => Some(token_counts.clone()),
            _ => None,
        })
        .unwrap();
    assert!(counts.contains(&512));
}

#[test]
fn search_cap_stops_runaway_loops() {
    let looping = json!({"reply": {"tool_calls": [{"arguments": {"query": "river"}}]}, "usage": {"input": 1, "output": 1}, "repeat": true});
    let config = AgentConfig {
        max_search_calls: 3,
        ..AgentConfig::default()
    };
    let trace = agent_with(config, mock(&[looping]), None).run(&task("qc"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.search_calls, 3);
    assert_eq!(trace.status, RunStatus::Unanswered);
    assert!(trace.flags.contains(&"max_search_calls_reached".to_string()));
}

#[test]
fn bad_tool_arguments_are_answered_and_flagged() {
    let bad = json!({"reply": {"tool_calls": [{"id": "c1", "arguments": "{not json"}, {"id": "c2", "name": "browse", "arguments": {"url": "x"}}]}});
    let trace = agent_with(AgentConfig::default(), mock(&[bad, answer(FINAL, (1, 0, 1, 0))]), None).run(&task("qb"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.search_calls, 2);
    assert!(trace.flags.iter().any(|f| f == "invalid_tool_call:c1"));
    assert!(trace.flags.iter().any(|f| f == "invalid_tool_call:c2"));
    assert_eq!(trace.status, RunStatus::Answered);
}

#[test]
fn endpoint_failure_marks_run_failed() {
    let trace = agent_with(AgentConfig::default(), mock(&[search("river", (1, 0, 1, 0))]), None).run(&task("qf"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.status, RunStatus::Failed);
    assert!(trace.flags.iter().any(|f| f.starts_with("llm_error:")));
}

#[test]
fn unparseable_answer_is_unanswered() {
    let trace = agent_with(AgentConfig::default(), mock(&[answer("I give up.", (1, 0, 1, 0))]), None).run(&task("qu"), &Ledger::new());
    assert_eq!(trace.status, RunStatus::Unanswered);
    assert!(trace.final_answer.is_none());
}

#[test]
fn context_budget_drops_old_tool_results() {
    let script = [search("river", (1, 0, 1, 0)), search("forest", (1, 0, 1, 0)), search("desert", (1, 0, 1, 0)), answer(FINAL, (1, 0, 1, 0))];
    let config = AgentConfig {
        max_context_tokens: 1200,
        max_output_tokens: Some(1000),
        ..AgentConfig::default()
    };
    let trace = agent_with(config, mock(&script), None).run(&task("qx"), &Ledger::new());
    check_invariants(&trace);
    assert_eq!(trace.status, RunStatus::Answered);
    let truncations: Vec<_> = trace.events.iter().filter(|e| matches!(e, TraceEvent::ContextTruncated { .. })).collect();
    assert!(!truncations.is_empty());
    for t in truncations {
        if let TraceEvent::ContextTruncated { tokens_after, budget, .. } = t {
            assert!(tokens_after <= budget);
        }
    }
}

#[test]
fn unsatisfiable_context_ends_the_run() {
    let config = AgentConfig {
        max_context_tokens: 40,
        max_output_tokens: Some(30),
        ..AgentConfig::default()
    };
    let trace = agent_with(config, mock(&[answer(FINAL, (1, 0, 1, 0))]), None).run(&task("qe"), &Ledger::new());
    assert_eq!(trace.status, RunStatus::Unanswered);
    assert!(trace.flags.contains(&"context_exhausted".to_string()));
}

#[test]
fn reranking_reorders_handoff_and_logs_rerank_usage() {
    let reverse = json!({"reply": {"content": "[20] > [19] > [18] > [17] > [16] > [15] > [14] > [13] > [12] > [11] > [10] > [9] > [8] > [7] > [6] > [5] > [4] > [3] > [2] > [1]"}, "usage": {"input": 900, "output": 40}, "repeat": true});
    let config = AgentConfig {
        rerank: RerankConfig::with_depth(20),
        ..AgentConfig::default()
    };
    let llm = mock(&[search("document about", (10, 0, 2, 0)), answer(FINAL, (10, 0, 2, 0))]);
    let ledger = Ledger::new();
    let trace = agent_with(config, llm, Some(mock(&[reverse]))).run(&task("qr"), &ledger);
    check_invariants(&trace);

    let first = lexical_topk(&corpus(), "qr", "document about", 20).unwrap();
    let want: Vec<String> = first.docids().iter().rev().take(5).map(|s| s.to_string()).collect();
    let got = trace
        .events
        .iter()
        .find_map(|e| match e {
            TraceEvent::ToolResult { docids, .. } => Some(docids.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(got, want);
    let rerank = aggregate(&ledger.records(), |r| r.stage == Stage::Rerank);
    assert_eq!((rerank.call_count, rerank.input_noncached, rerank.output_total), (1, 900, 40));
    assert_eq!(trace.events.iter().filter(|e| matches!(e, TraceEvent::RerankWindow { .. })).count(), 1);
}

#[test]
fn rerank_depth_requires_endpoint() {
    let corpus = corpus();
    let config = AgentConfig {
        rerank: RerankConfig::with_depth(10),
        ..AgentConfig::default()
    };
    let r = Agent::new(config, mock(&[]), Arc::new(LexicalRetriever::new(&corpus)), None, corpus);
    assert!(r.is_err());
}
