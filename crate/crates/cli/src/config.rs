//! Experiment configuration, serialized verbatim into each run directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use deepsearch_core::agent::AgentConfig;
use deepsearch_core::corpus::{ingest_corpus, tokenizer_from_id, CorpusStore};
use deepsearch_core::eval::{load_queries, JudgeConfig, QueryTask};
use deepsearch_core::ledger::{DEFAULT_ALPHAS, DEFAULT_BETAS};
use deepsearch_core::retrieval::{load_embeddings, DenseRetriever, LexicalRetriever, Retriever};
use serde::{Deserialize, Serialize};

use crate::endpoints::EndpointSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Dense,
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingPaths {
    pub manifest: PathBuf,
    pub vectors: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub agent: Option<EndpointSpec>,
    pub reranker: Option<EndpointSpec>,
    pub judge: Option<EndpointSpec>,
    pub embedder: Option<EndpointSpec>,
    pub embedder_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub embeddings: Option<EmbeddingPaths>,
    #[serde(default = "default_retriever")]
    pub retriever: RetrieverKind,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub output_dir: PathBuf,
    /// Shuffles query order when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
}

fn default_label() -> String {
    "run".into()
}
fn default_retriever() -> RetrieverKind {
    RetrieverKind::Lexical
}
fn default_tokenizer() -> String {
    "whitespace".into()
}
fn default_concurrency() -> usize {
    1
}
fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_betas() -> Vec<f64> {
    DEFAULT_BETAS.to_vec()
}

fn must_exist(path: &Path, what: &str) -> Result<PathBuf> {
    ensure!(path.exists(), "{what} {} does not exist", path.display());
    path.canonicalize()
        .with_context(|| format!("resolving {}", path.display()))
}

impl ExperimentConfig {
    pub fn new(corpus: PathBuf, queries: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            label: default_label(),
            corpus,
            queries,
            embeddings: None,
            retriever: default_retriever(),
            tokenizer: default_tokenizer(),
            agent: AgentConfig::default(),
            judge: JudgeConfig::default(),
            endpoints: Endpoints::default(),
            concurrency: 1,
            output_dir,
            seed: None,
            alphas: default_alphas(),
            betas: default_betas(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
    }

    /// Checks invariants and resolves input paths to absolute form.
    pub fn validate(&mut self) -> Result<()> {
        self.corpus = must_exist(&self.corpus, "corpus")?;
        self.queries = must_exist(&self.queries, "queries file")?;
        if let Some(e) = &mut self.embeddings {
            e.manifest = must_exist(&e.manifest, "embedding manifest")?;
            e.vectors = must_exist(&e.vectors, "embedding vectors")?;
        }
        for spec in [&self.endpoints.agent, &self.endpoints.reranker, &self.endpoints.judge, &self.endpoints.embedder]
            .into_iter()
            .flatten()
        {
            if let EndpointSpec::Mock(p) = spec {
                must_exist(p, "mock script")?;
            }
        }
        tokenizer_from_id(&self.tokenizer)?;
        ensure!(self.concurrency >= 1, "concurrency must be at least 1");
        if self.retriever == RetrieverKind::Dense {
            ensure!(self.embeddings.is_some(), "dense retrieval needs --embeddings-manifest and --embeddings-vectors");
            ensure!(self.endpoints.embedder.is_some(), "dense retrieval needs an embedder endpoint");
        }
        if self.agent.rerank.enabled() {
            ensure!(self.endpoints.reranker.is_some(), "rerank depth {} needs a reranker endpoint", self.agent.rerank.depth);
        }
        self.agent.validate()?;
        if self.alphas.is_empty() || self.betas.is_empty() {
            bail!("alpha and beta grids must be non-empty");
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Arc<CorpusStore>> {
        let tok = tokenizer_from_id(&self.tokenizer)?;
        Ok(Arc::new(ingest_corpus(&self.corpus, tok)?))
    }

    pub fn load_tasks(&self) -> Result<Vec<QueryTask>> {
        Ok(load_queries(&self.queries)?)
    }

    pub fn build_retriever(&self, corpus: &CorpusStore, api_key: Option<&str>) -> Result<Arc<dyn Retriever>> {
        Ok(match self.retriever {
            RetrieverKind::Lexical => Arc::new(LexicalRetriever::new(corpus)),
            RetrieverKind::Dense => {
                let paths = self.embeddings.as_ref().context("dense retrieval needs embeddings")?;
                let index = load_embeddings(&paths.manifest, &paths.vectors)?;
                index.check_corpus(corpus)?;
                let embedder = self
                    .endpoints
                    .embedder
                    .as_ref()
                    .context("dense retrieval needs an embedder endpoint")?
                    .embedder(api_key, self.endpoints.embedder_model.as_deref())?;
                Arc::new(DenseRetriever::new(Arc::new(index), embedder))
            }
        })
    }

    /// Same experiment, ignoring endpoints (which may change across a resume).
    pub fn same_experiment(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            endpoints: Endpoints::default(),
            concurrency: 1,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
