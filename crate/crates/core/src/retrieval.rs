//! First-stage retrieval: exact dense top-k over ingested embeddings and a BM25
//! lexical baseline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusStore;
use crate::llm::RetryPolicy;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vectors file {path}: header claims {rows} rows x {dim} dims ({expected} bytes) but file holds {actual} bytes")]
    SizeMismatch {
        path: String,
        rows: u32,
        dim: u32,
        expected: u64,
        actual: u64,
    },
    #[error("vectors file {0}: header is shorter than 8 bytes")]
    TruncatedHeader(String),
    #[error("vectors file declares dim 0")]
    ZeroDim,
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest row {row} out of range for {rows} rows (line {line})")]
    RowOutOfRange { row: u64, rows: u32, line: usize },
    #[error("vector row {0} has no manifest entry")]
    UnmappedRow(usize),
    #[error("index docid {0:?} is not in the corpus")]
    DocidNotInCorpus(String),
    #[error("query vector has {got} dims, index has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query vector has zero norm")]
    ZeroNormQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("ranked list violates ordering or uniqueness at position {0}")]
    InvalidRanking(usize),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub docid: String,
    pub score: f64,
}

/// Ordered candidates for one query. Scores are non-increasing and docids distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    entries: Vec<ScoredDoc>,
}

impl RankedList {
    pub fn new(qid: impl Into<String>, entries: Vec<ScoredDoc>) -> Result<Self, RetrievalError> {
        let list = Self {
            qid: qid.into(),
            entries,
        };
        list.validate()?;
        Ok(list)
    }

    pub(crate) fn from_sorted(qid: impl Into<String>, entries: Vec<ScoredDoc>) -> Self {
        let list = Self {
            qid: qid.into(),
            entries,
        };
        debug_assert!(list.validate().is_ok());
        list
    }

    pub fn empty(qid: impl Into<String>) -> Self {
        Self {
            qid: qid.into(),
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let mut seen = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.docid.as_str()) || e.score.is_nan() {
                return Err(RetrievalError::InvalidRanking(i));
            }
            if i > 0 && self.entries[i - 1].score < e.score {
                return Err(RetrievalError::InvalidRanking(i));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ScoredDoc] {
        &self.entries
    }

    pub fn docids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.docid.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First `k` entries (all of them when shorter).
    pub fn prefix(&self, k: usize) -> RankedList {
        Self {
            qid: self.qid.clone(),
            entries: self.entries[..k.min(self.entries.len())].to_vec(),
        }
    }

    pub fn into_entries(self) -> Vec<ScoredDoc> {
        self.entries
    }
}

/// Best-first ordering: higher score, then ascending docid.
fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

struct HeapEntry<'a> {
    score: f64,
    docid: &'a str,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    // Max-heap top is the worst-ranked entry kept so far.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.docid, other.score, other.docid)
    }
}

fn select_top_k<'a, I>(qid: &str, scored: I, k: usize) -> RankedList
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut heap: BinaryHeap<HeapEntry<'a>> = BinaryHeap::with_capacity(k + 1);
    for (docid, score) in scored {
        let entry = HeapEntry { score, docid };
        if heap.len() < k {
            heap.push(entry);
        } else if let Some(worst) = heap.peek() {
            if entry < *worst {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|e| ScoredDoc {
            docid: e.docid.to_string(),
            score: e.score,
        })
        .collect();
    RankedList::from_sorted(qid, entries)
}

/// Dense vectors aligned with docids, row-major.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    docids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
}

#[derive(Deserialize, Serialize)]
struct ManifestLine {
    docid: String,
    row: u64,
}

impl EmbeddingIndex {
    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f32>)>) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::ZeroDim);
        }
        let mut docids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (docid, v) in rows {
            if v.len() != dim {
                return Err(RetrievalError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            docids.push(docid);
            vectors.extend_from_slice(&v);
        }
        Ok(Self::assemble(dim, docids, vectors))
    }

    fn assemble(dim: usize, docids: Vec<String>, vectors: Vec<f32>) -> Self {
        let norms = vectors.chunks_exact(dim).map(l2_norm).collect();
        Self {
            dim,
            docids,
            vectors,
            norms,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docids.is_empty()
    }

    pub fn docids(&self) -> &[String] {
        &self.docids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    /// Checks that every indexed docid exists in `store`.
    pub fn check_corpus(&self, store: &CorpusStore) -> Result<(), RetrievalError> {
        match self.docids.iter().find(|d| !store.contains(d)) {
            Some(d) => Err(RetrievalError::DocidNotInCorpus(d.clone())),
            None => Ok(()),
        }
    }

    /// Writes the manifest JSONL and packed vectors file readable by [`load_embeddings`].
    pub fn write(&self, manifest_path: &Path, vectors_path: &Path) -> Result<(), RetrievalError> {
        let mut manifest = String::new();
        for (row, docid) in self.docids.iter().enumerate() {
            let line = serde_json::to_string(&ManifestLine {
                docid: docid.clone(),
                row: row as u64,
            })
            .expect("manifest line serializes");
            manifest.push_str(&line);
            manifest.push('\n');
        }
        fs::write(manifest_path, manifest).map_err(|source| RetrievalError::Io {
            path: manifest_path.display().to_string(),
            source,
        })?;
        let io = |source| RetrievalError::Io {
            path: vectors_path.display().to_string(),
            source,
        };
        let mut out = fs::File::create(vectors_path).map_err(io)?;
        let mut buf = Vec::with_capacity(8 + self.vectors.len() * 4);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
        Ok(())
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Loads an index from a `{docid, row}` manifest and a packed little-endian f32 matrix
/// with an 8-byte `(rows: u32, dim: u32)` header.
pub fn load_embeddings(manifest_path: &Path, vectors_path: &Path) -> Result<EmbeddingIndex, RetrievalError> {
    let bytes = fs::read(vectors_path).map_err(|source| RetrievalError::Io {
        path: vectors_path.display().to_string(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(RetrievalError::TruncatedHeader(vectors_path.display().to_string()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if dim == 0 {
        return Err(RetrievalError::ZeroDim);
    }
    let expected = 8 + u64::from(rows) * u64::from(dim) * 4;
    if expected != bytes.len() as u64 {
        return Err(RetrievalError::SizeMismatch {
            path: vectors_path.display().to_string(),
            rows,
            dim,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let vectors: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let manifest = fs::File::open(manifest_path).map_err(|source| RetrievalError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let mut by_row: Vec<Option<String>> = vec![None; rows as usize];
    let mut seen_docids = std::collections::HashSet::new();
    for (idx, line) in BufReader::new(manifest).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| RetrievalError::Io {
            path: manifest_path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| RetrievalError::Manifest {
            line: lineno,
            message: e.to_string(),
        })?;
        if entry.row >= u64::from(rows) {
            return Err(RetrievalError::RowOutOfRange {
                row: entry.row,
                rows,
                line: lineno,
            });
        }
        let slot = &mut by_row[entry.row as usize];
        if slot.is_some() {
            return Err(RetrievalError::Manifest {
                line: lineno,
                message: format!("row {} assigned twice", entry.row),
            });
        }
        if !seen_docids.insert(entry.docid.clone()) {
            return Err(RetrievalError::Manifest {
                line: lineno,
                message: format!("docid {:?} assigned twice", entry.docid),
            });
        }
        *slot = Some(entry.docid);
    }
    let docids = by_row
        .into_iter()
        .enumerate()
        .map(|(row, d)| d.ok_or(RetrievalError::UnmappedRow(row)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingIndex::assemble(dim as usize, docids, vectors))
}

/// Exact top-k by cosine similarity; ties broken by ascending docid.
pub fn dense_topk(index: &EmbeddingIndex, qid: &str, qvec: &[f32], k: usize) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if qvec.len() != index.dim {
        return Err(RetrievalError::DimMismatch {
            expected: index.dim,
            got: qvec.len(),
        });
    }
    let qnorm = l2_norm(qvec);
    if qnorm == 0.0 {
        return Err(RetrievalError::ZeroNormQuery);
    }
    let scored = index.docids.iter().enumerate().map(|(row, docid)| {
        let dnorm = index.norms[row];
        let score = if dnorm == 0.0 {
            0.0
        } else {
            let dot: f64 = index
                .vector(row)
                .iter()
                .zip(qvec)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            dot / (qnorm * dnorm)
        };
        (docid.as_str(), score)
    });
    Ok(select_top_k(qid, scored, k))
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding transport failure (retryable): {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("embedding has {got} dims, index expects {expected}")]
    DimMismatch { expected: usize, got: usize },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

/// Anything that turns texts into dense vectors.
pub trait EmbeddingEndpoint: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Embeds a single query and checks its dimension against the index.
pub fn embed_query(text: &str, endpoint: &dyn EmbeddingEndpoint, dim: usize) -> Result<Vec<f32>, EmbedError> {
    let mut out = endpoint.embed(&[text.to_string()])?;
    if out.len() != 1 {
        return Err(EmbedError::Protocol(format!("expected 1 embedding, got {}", out.len())));
    }
    let v = out.pop().unwrap();
    if v.len() != dim {
        return Err(EmbedError::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    Ok(v)
}

/// Client for an HTTP embeddings service: `{input: [..]}` in, `{data: [{embedding}]}` out.
pub struct HttpEmbeddingEndpoint {
    url: String,
    api_key: Option<String>,
    model: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingEndpoint {
    pub fn new(base_url: &str, api_key: Option<String>, model: Option<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/embeddings") {
            base.to_string()
        } else {
            format!("{base}/embeddings")
        };
        Self {
            url,
            api_key,
            model,
            retry: RetryPolicy::default(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(300))
                .build()
                .expect("http client builds"),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        #[derive(Serialize)]
        struct Req<'a> {
            input: &'a [String],
            #[serde(skip_serializing_if = "Option::is_none")]
            model: Option<&'a str>,
        }
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f32>,
        }
        #[derive(Deserialize)]
        struct Resp {
            data: Vec<Item>,
        }
        let mut req = self.client.post(&self.url).json(&Req {
            input: texts,
            model: self.model.as_deref(),
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(EmbedError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(EmbedError::Protocol(format!("HTTP {status}")));
        }
        let body: Resp = resp.json().map_err(|e| EmbedError::Protocol(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::Protocol(format!(
                "sent {} inputs, got {} embeddings",
                texts.len(),
                body.data.len()
            )));
        }
        Ok(body.data.into_iter().map(|i| i.embedding).collect())
    }
}

impl EmbeddingEndpoint for HttpEmbeddingEndpoint {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.retry
            .run(|| self.attempt(texts), EmbedError::is_retryable)
            .map(|(v, _)| v)
    }
}

/// Scripted embedder: exact-text lookup with an optional fallback vector.
#[derive(Debug, Clone, Default)]
pub struct MockEmbeddingEndpoint {
    vectors: HashMap<String, Vec<f32>>,
    fallback: Option<Vec<f32>>,
}

impl MockEmbeddingEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, text: impl Into<String>, v: Vec<f32>) -> Self {
        self.vectors.insert(text.into(), v);
        self
    }

    pub fn with_fallback(mut self, v: Vec<f32>) -> Self {
        self.fallback = Some(v);
        self
    }
}

impl EmbeddingEndpoint for MockEmbeddingEndpoint {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .or(self.fallback.as_ref())
                    .cloned()
                    .ok_or_else(|| EmbedError::Protocol(format!("no scripted vector for {t:?}")))
            })
            .collect()
    }
}

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

/// Lowercases, splits on whitespace, and strips non-alphanumeric characters at token edges.
pub fn lexical_terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Inverted index for BM25 scoring over a corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    docids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build(store: &CorpusStore) -> Self {
        Self::with_params(store, BM25_K1, BM25_B)
    }

    pub fn with_params(store: &CorpusStore, k1: f64, b: f64) -> Self {
        let mut docids = Vec::with_capacity(store.len());
        let mut doc_len = Vec::with_capacity(store.len());
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (idx, doc) in store.documents().enumerate() {
            let terms = lexical_terms(&doc.text);
            doc_len.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((idx as u32, n));
            }
            docids.push(doc.docid.clone());
        }
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avg_len = if docids.is_empty() {
            0.0
        } else {
            total as f64 / docids.len() as f64
        };
        Self {
            docids,
            doc_len,
            avg_len,
            postings,
            k1,
            b,
        }
    }

    /// BM25 top-k; documents without any query term are not returned.
    pub fn topk(&self, qid: &str, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let n = self.docids.len() as f64;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in lexical_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let dl = f64::from(self.doc_len[doc as usize]);
                let norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_len);
                *scores.entry(doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        Ok(select_top_k(
            qid,
            scores
                .into_iter()
                .map(|(doc, s)| (self.docids[doc as usize].as_str(), s)),
            k,
        ))
    }
}

/// One-shot BM25 search that builds its index from `store`.
pub fn lexical_topk(store: &CorpusStore, qid: &str, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
    Bm25Index::build(store).topk(qid, query, k)
}

/// A first-stage retriever the agent can call as its `search` tool.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, qid: &str, query: &str, k: usize) -> Result<RankedList, RetrievalError>;
}

pub struct DenseRetriever {
    index: Arc<EmbeddingIndex>,
    embedder: Arc<dyn EmbeddingEndpoint>,
}

impl DenseRetriever {
    pub fn new(index: Arc<EmbeddingIndex>, embedder: Arc<dyn EmbeddingEndpoint>) -> Self {
        Self { index, embedder }
    }
}

impl Retriever for DenseRetriever {
    fn retrieve(&self, qid: &str, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        let qvec = embed_query(query, self.embedder.as_ref(), self.index.dim())?;
        dense_topk(&self.index, qid, &qvec, k)
    }
}

pub struct LexicalRetriever {
    index: Bm25Index,
}

impl LexicalRetriever {
    pub fn new(store: &CorpusStore) -> Self {
        Self {
            index: Bm25Index::build(store),
        }
    }
}

impl Retriever for LexicalRetriever {
    fn retrieve(&self, qid: &str, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        self.index.topk(qid, query, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WhitespaceTokenizer;

    fn two_doc_index() -> EmbeddingIndex {
        EmbeddingIndex::from_rows(
            2,
            vec![("d1".into(), vec![1.0, 0.0]), ("d2".into(), vec![0.0, 1.0])],
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_top1() {
        let list = dense_topk(&two_doc_index(), "q", &[1.0, 0.0], 1).unwrap();
        assert_eq!(
            list.entries(),
            &[ScoredDoc {
                docid: "d1".into(),
                score: 1.0
            }]
        );
    }

    #[test]
    fn k_clamps_to_index_size() {
        let list = dense_topk(&two_doc_index(), "q", &[1.0, 0.5], 10).unwrap();
        assert_eq!(list.docids(), vec!["d1", "d2"]);
    }

    #[test]
    fn ties_break_by_docid() {
        let index = EmbeddingIndex::from_rows(
            2,
            vec![
                ("b".into(), vec![1.0, 0.0]),
                ("a".into(), vec![2.0, 0.0]),
                ("c".into(), vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let list = dense_topk(&index, "q", &[1.0, 0.0], 2).unwrap();
        assert_eq!(list.docids(), vec!["a", "b"]);
    }

    #[test]
    fn dense_errors() {
        let index = two_doc_index();
        assert!(matches!(
            dense_topk(&index, "q", &[0.0, 0.0], 1),
            Err(RetrievalError::ZeroNormQuery)
        ));
        assert!(matches!(
            dense_topk(&index, "q", &[1.0], 1),
            Err(RetrievalError::DimMismatch { .. })
        ));
        assert!(matches!(
            dense_topk(&index, "q", &[1.0, 0.0], 0),
            Err(RetrievalError::InvalidK)
        ));
    }

    #[test]
    fn mock_embedder_passthrough_and_dim_check() {
        let mock = MockEmbeddingEndpoint::new().with("x", vec![0.5; 7]);
        assert_eq!(embed_query("x", &mock, 7).unwrap(), vec![0.5; 7]);
        assert!(matches!(
            embed_query("x", &mock, 8),
            Err(EmbedError::DimMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn lexical_single_term() {
        let store =
            CorpusStore::from_pairs(Arc::new(WhitespaceTokenizer), [("d1", "cat"), ("d2", "dog")])
                .unwrap();
        let list = lexical_topk(&store, "q", "cat", 2).unwrap();
        assert_eq!(list.docids(), vec!["d1"]);
        assert!(lexical_topk(&store, "q", "zebra", 2).unwrap().is_empty());
        assert!(lexical_topk(&store, "q", "  ?! ", 2).unwrap().is_empty());
    }

    #[test]
    fn terms_normalize() {
        assert_eq!(lexical_terms("The Cat, sat."), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn ranked_list_validation() {
        let bad = RankedList::new(
            "q",
            vec![
                ScoredDoc { docid: "a".into(), score: 0.1 },
                ScoredDoc { docid: "b".into(), score: 0.5 },
            ],
        );
        assert!(bad.is_err());
        let dup = RankedList::new(
            "q",
            vec![
                ScoredDoc { docid: "a".into(), score: 0.5 },
                ScoredDoc { docid: "a".into(), score: 0.1 },
            ],
        );
        assert!(dup.is_err());
    }
}
