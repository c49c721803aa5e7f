//! Core library for running and costing deep-research search agents: corpus
//! and tokenizers, dense and lexical retrieval, listwise reranking, the
//! agent loop, chat endpoints, token accounting, and evaluation.

pub mod agent;
pub mod corpus;
pub mod eval;
pub mod ledger;
pub mod llm;
pub mod rerank;
pub mod retrieval;
