//! One-shot retrieval followed by listwise reranking of the top `d` candidates.

use std::io::Write;
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use deepsearch_core::corpus::CorpusStore;
use deepsearch_core::eval::{summarize_retrieval, QueryTask, Relevance, RetrievalScores};
use deepsearch_core::ledger::Ledger;
use deepsearch_core::llm::ChatEndpoint;
use deepsearch_core::rerank::{ListwiseReranker, RerankConfig};
use deepsearch_core::retrieval::Retriever;
use serde::Serialize;

pub const FIRST_STAGE_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankEvalRow {
    pub depth: usize,
    pub relevance: Relevance,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub queries: usize,
    pub excluded: usize,
    pub repaired_windows: usize,
    pub fallback_windows: usize,
}

/// For each depth, the full question is the query; the reranked top `d` is
/// followed by the untouched first-stage tail. Depth 0 is the retriever alone.
pub fn rerank_eval(
    tasks: &[QueryTask],
    retriever: &dyn Retriever,
    corpus: &CorpusStore,
    reranker: Option<Arc<dyn ChatEndpoint>>,
    template: &RerankConfig,
    depths: &[usize],
    ledger: &Ledger,
) -> Result<Vec<RerankEvalRow>> {
    let first: Vec<Vec<String>> = tasks
        .iter()
        .map(|t| {
            retriever
                .retrieve(&t.qid, &t.question, FIRST_STAGE_K)
                .map(|r| r.docids().into_iter().map(String::from).collect())
                .with_context(|| format!("retrieving for {}", t.qid))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &depth in depths {
        ensure!(depth <= FIRST_STAGE_K, "rerank depth {depth} exceeds the {FIRST_STAGE_K} first-stage candidates");
        let mut scores = [Vec::new(), Vec::new()];
        let (mut repaired, mut fallback) = (0, 0);
        let rr = if depth > 0 {
            let endpoint = reranker.clone().context("rerank depth > 0 needs a reranker endpoint")?;
            let config = RerankConfig {
                depth,
                handoff_k: template.handoff_k.min(depth),
                ..template.clone()
            };
            Some(ListwiseReranker::new(endpoint, config)?)
        } else {
            None
        };
        for (task, list) in tasks.iter().zip(&first) {
            let ranked: Vec<String> = match &rr {
                None => list.clone(),
                Some(rr) => {
                    let input = deepsearch_core::rerank::rank_scored(&task.qid, list.clone());
                    let out = rr.sliding_window_rerank(&task.question, &input, corpus, ledger)?;
                    repaired += out.windows.iter().filter(|w| w.repair_applied).count();
                    fallback += out.windows.iter().filter(|w| w.fallback).count();
                    let mut merged: Vec<String> = out.list.docids().into_iter().map(String::from).collect();
                    merged.extend(list.iter().skip(merged.len()).cloned());
                    merged
                }
            };
            for (slot, rel) in [Relevance::Evidence, Relevance::Gold].into_iter().enumerate() {
                scores[slot].push(RetrievalScores::compute(&ranked, task.relevant(rel)));
            }
        }
        for (slot, rel) in [Relevance::Evidence, Relevance::Gold].into_iter().enumerate() {
            let s = summarize_retrieval(&scores[slot]);
            rows.push(RerankEvalRow {
                depth,
                relevance: rel,
                ndcg_at_5: s.ndcg_at_5,
                ndcg_at_10: s.ndcg_at_10,
                recall_at_5: s.recall_at_5,
                recall_at_10: s.recall_at_10,
                queries: s.queries,
                excluded: s.excluded,
                repaired_windows: repaired,
                fallback_windows: fallback,
            });
        }
    }
    Ok(rows)
}

/// CSV with metrics scaled by 100.
pub fn write_rerank_csv<W: Write>(rows: &[RerankEvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "depth",
        "relevance",
        "ndcg_at_5",
        "ndcg_at_10",
        "recall_at_5",
        "recall_at_10",
        "queries",
        "excluded",
        "repaired_windows",
        "fallback_windows",
    ])?;
    for r in rows {
        w.write_record([
            r.depth.to_string(),
            r.relevance.as_str().to_string(),
            format!("{:.2}", r.ndcg_at_5 * 100.0),
            format!("{:.2}", r.ndcg_at_10 * 100.0),
            format!("{:.2}", r.recall_at_5 * 100.0),
            format!("{:.2}", r.recall_at_10 * 100.0),
            r.queries.to_string(),
            r.excluded.to_string(),
            r.repaired_windows.to_string(),
            r.fallback_windows.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
