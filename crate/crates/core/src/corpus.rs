//! Document collection and token bookkeeping.
//!
//! Every place a document enters a prompt goes through [`Tokenizer::truncate_tokens`],
//! so the tokenizer attached to a [`CorpusStore`] decides what "512 tokens" means
//! for a given experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-candidate token ceiling applied before documents reach the agent or the reranker.
pub const CANDIDATE_TOKEN_LIMIT: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate docid {docid:?} on line {line}")]
    DuplicateDocid { docid: String, line: usize },
    #[error("empty docid on line {line}")]
    EmptyDocid { line: usize },
    #[error("unknown docid {0:?}")]
    UnknownDocid(String),
    #[error("unknown tokenizer {0:?} (expected \"whitespace\" or \"bytes4\")")]
    UnknownTokenizer(String),
}

/// Splits text into tokens for accounting and truncation.
///
/// Implementations must be deterministic, and `truncate_tokens` must return a
/// prefix of its input that ends on a token boundary.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;

    fn count_tokens(&self, text: &str) -> usize;

    /// Longest token-boundary prefix of `text` holding at most `limit` tokens.
    /// Returns `text` unchanged when it already fits.
    fn truncate_tokens<'a>(&self, text: &'a str, limit: usize) -> &'a str;
}

/// Default tokenizer: one token per maximal run of non-whitespace characters
/// (Unicode `White_Space`).
///
/// Counting is additive over whitespace-joined concatenation:
/// `count(a + " " + b) == count(a) + count(b)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> &str {
        "whitespace"
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate_tokens<'a>(&self, text: &'a str, limit: usize) -> &'a str {
        if self.count_tokens(text) <= limit {
            return text;
        }
        if limit == 0 {
            return "";
        }
        let mut seen = 0;
        let mut in_token = false;
        for (idx, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if in_token {
                    in_token = false;
                    if seen == limit {
                        return &text[..idx];
                    }
                }
            } else if !in_token {
                in_token = true;
                seen += 1;
            }
        }
        text
    }
}

/// Approximates subword tokenizers as one token per 4 bytes of UTF-8:
/// `count = ceil(bytes / 4)`.
///
/// Concatenation is subadditive: `count(a + b) <= count(a) + count(b)`.
/// Truncation keeps at most `4 * limit` bytes, backing off to a char boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteChunkTokenizer;

impl ByteChunkTokenizer {
    pub const BYTES_PER_TOKEN: usize = 4;
}

impl Tokenizer for ByteChunkTokenizer {
    fn id(&self) -> &str {
        "bytes4"
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.len().div_ceil(Self::BYTES_PER_TOKEN)
    }

    fn truncate_tokens<'a>(&self, text: &'a str, limit: usize) -> &'a str {
        let max_bytes = limit.saturating_mul(Self::BYTES_PER_TOKEN);
        if text.len() <= max_bytes {
            return text;
        }
        let mut end = max_bytes;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        &text[..end]
    }
}

/// Resolves a tokenizer by the id recorded in configs and traces.
pub fn tokenizer_from_id(id: &str) -> Result<Arc<dyn Tokenizer>, CorpusError> {
    match id {
        "whitespace" => Ok(Arc::new(WhitespaceTokenizer)),
        "bytes4" => Ok(Arc::new(ByteChunkTokenizer)),
        other => Err(CorpusError::UnknownTokenizer(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub docid: String,
    pub text: String,
    pub token_len: usize,
}

#[derive(Deserialize)]
struct CorpusLine {
    docid: String,
    text: String,
}

#[derive(Serialize)]
struct CorpusLineRef<'a> {
    docid: &'a str,
    text: &'a str,
}

/// Immutable docid-addressed document collection.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    documents: BTreeMap<String, Document>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl PartialEq for CorpusStore {
    fn eq(&self, other: &Self) -> bool {
        self.tokenizer_id() == other.tokenizer_id() && self.documents == other.documents
    }
}

impl CorpusStore {
    pub fn new(tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self {
            documents: BTreeMap::new(),
            tokenizer,
        }
    }

    /// Builds a store from `(docid, text)` pairs, enforcing docid uniqueness.
    pub fn from_pairs<I, S, T>(tokenizer: Arc<dyn Tokenizer>, pairs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut store = Self::new(tokenizer);
        for (i, (docid, text)) in pairs.into_iter().enumerate() {
            store.insert(docid.into(), text.into(), i + 1)?;
        }
        Ok(store)
    }

    fn insert(&mut self, docid: String, text: String, line: usize) -> Result<(), CorpusError> {
        if docid.is_empty() {
            return Err(CorpusError::EmptyDocid { line });
        }
        if self.documents.contains_key(&docid) {
            return Err(CorpusError::DuplicateDocid { docid, line });
        }
        let token_len = self.tokenizer.count_tokens(&text);
        self.documents.insert(
            docid.clone(),
            Document {
                docid,
                text,
                token_len,
            },
        );
        Ok(())
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    pub fn tokenizer_id(&self) -> &str {
        self.tokenizer.id()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn contains(&self, docid: &str) -> bool {
        self.documents.contains_key(docid)
    }

    pub fn get(&self, docid: &str) -> Result<&Document, CorpusError> {
        self.documents
            .get(docid)
            .ok_or_else(|| CorpusError::UnknownDocid(docid.to_string()))
    }

    /// Documents in ascending docid order.
    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.count_tokens(text)
    }

    pub fn truncate_tokens<'a>(&self, text: &'a str, limit: usize) -> &'a str {
        self.tokenizer.truncate_tokens(text, limit)
    }

    /// Document text cut to `limit` tokens under the store's tokenizer.
    pub fn truncated_text(&self, docid: &str, limit: usize) -> Result<&str, CorpusError> {
        let doc = self.get(docid)?;
        Ok(self.tokenizer.truncate_tokens(&doc.text, limit))
    }

    /// Writes the store as corpus JSONL, one `{docid, text}` object per line in docid order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for doc in self.documents.values() {
            let line = serde_json::to_string(&CorpusLineRef {
                docid: &doc.docid,
                text: &doc.text,
            })
            .map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Reads a corpus JSONL file. Blank lines are skipped; unknown fields are ignored.
pub fn ingest_corpus(path: &Path, tokenizer: Arc<dyn Tokenizer>) -> Result<CorpusStore, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    read_corpus(BufReader::new(file), tokenizer).map_err(|e| match e {
        CorpusError::Io { source, .. } => io_err(source),
        other => other,
    })
}

pub fn read_corpus<R: BufRead>(reader: R, tokenizer: Arc<dyn Tokenizer>) -> Result<CorpusStore, CorpusError> {
    let mut store = CorpusStore::new(tokenizer);
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        store.insert(parsed.docid, parsed.text, lineno)?;
    }
    Ok(store)
}
