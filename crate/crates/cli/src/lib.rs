//! Batch experiment driver: ingest, retrieval, reranking evaluation, agent runs,
//! judging and cost reports over self-contained run directories.

pub mod commands;
pub mod config;
pub mod endpoints;
pub mod fixtures;
pub mod judge;
pub mod report;
pub mod rerank_eval;
pub mod run;
pub mod rundir;
