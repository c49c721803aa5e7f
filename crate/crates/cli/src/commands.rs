//! Small data-inspection commands: corpus stats, embedding checks, first-stage retrieval.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use deepsearch_core::corpus::{ingest_corpus, tokenizer_from_id, CANDIDATE_TOKEN_LIMIT};
use deepsearch_core::retrieval::load_embeddings;
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestStats {
    pub documents: usize,
    pub tokenizer: String,
    pub total_tokens: u64,
    pub mean_tokens: f64,
    pub max_tokens: usize,
    /// Documents that a handoff would cut at the candidate limit.
    pub over_candidate_limit: usize,
}

pub fn cmd_ingest(corpus: &Path, tokenizer: &str) -> Result<IngestStats> {
    let store = ingest_corpus(corpus, tokenizer_from_id(tokenizer)?)?;
    let counts: Vec<usize> = store.documents().map(|d| store.count_tokens(&d.text)).collect();
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    Ok(IngestStats {
        documents: store.len(),
        tokenizer: store.tokenizer_id().to_string(),
        total_tokens: total,
        mean_tokens: if counts.is_empty() { 0.0 } else { total as f64 / counts.len() as f64 },
        max_tokens: counts.iter().copied().max().unwrap_or(0),
        over_candidate_limit: counts.iter().filter(|&&c| c > CANDIDATE_TOKEN_LIMIT).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedCheck {
    pub rows: usize,
    pub dim: usize,
    pub corpus_documents: usize,
}

/// Loads an embedding index and checks it covers exactly the corpus.
pub fn cmd_embed_load_check(corpus: &Path, tokenizer: &str, manifest: &Path, vectors: &Path) -> Result<EmbedCheck> {
    let store = ingest_corpus(corpus, tokenizer_from_id(tokenizer)?)?;
    let index = load_embeddings(manifest, vectors)?;
    index.check_corpus(&store)?;
    Ok(EmbedCheck {
        rows: index.len(),
        dim: index.dim(),
        corpus_documents: store.len(),
    })
}

#[derive(Serialize)]
struct RetrieveLine<'a> {
    qid: &'a str,
    rank: usize,
    docid: &'a str,
    score: f64,
}

/// Writes the top `k` for every query as JSONL `{qid, rank, docid, score}`.
pub fn cmd_retrieve<W: Write>(mut config: ExperimentConfig, api_key: Option<&str>, k: usize, mut out: W) -> Result<usize> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    let tasks = config.load_tasks()?;
    let retriever = config.build_retriever(&corpus, api_key)?;
    let mut lines = 0;
    for t in &tasks {
        let ranked = retriever.retrieve(&t.qid, &t.question, k).with_context(|| format!("retrieving for {}", t.qid))?;
        for (i, e) in ranked.entries().iter().enumerate() {
            let line = RetrieveLine {
                qid: &t.qid,
                rank: i + 1,
                docid: &e.docid,
                score: e.score,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
            lines += 1;
        }
    }
    Ok(lines)
}
