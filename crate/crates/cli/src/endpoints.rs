//! Endpoint descriptors: `http(s)://...` for a live service, `mock:<path>` for
//! an in-process scripted mock.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use deepsearch_core::corpus::Tokenizer;
use deepsearch_core::llm::{ChatEndpoint, HttpChatEndpoint, ScriptedMock};
use deepsearch_core::retrieval::{EmbeddingEndpoint, HttpEmbeddingEndpoint, MockEmbeddingEndpoint};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EndpointSpec {
    Http(String),
    Mock(PathBuf),
}

impl FromStr for EndpointSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("mock:") {
            if path.is_empty() {
                bail!("mock endpoint needs a script path: mock:<path>");
            }
            return Ok(EndpointSpec::Mock(PathBuf::from(path)));
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(EndpointSpec::Http(s.to_string()));
        }
        bail!("endpoint {s:?} is neither an http(s) URL nor mock:<path>")
    }
}

impl TryFrom<String> for EndpointSpec {
    type Error = anyhow::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EndpointSpec> for String {
    fn from(e: EndpointSpec) -> String {
        e.to_string()
    }
}

impl fmt::Display for EndpointSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointSpec::Http(url) => f.write_str(url),
            EndpointSpec::Mock(path) => write!(f, "mock:{}", path.display()),
        }
    }
}

impl EndpointSpec {
    pub fn chat(&self, api_key: Option<&str>, tokenizer: Arc<dyn Tokenizer>) -> Result<Arc<dyn ChatEndpoint>> {
        Ok(match self {
            EndpointSpec::Http(url) => Arc::new(HttpChatEndpoint::new(url, api_key.map(String::from), tokenizer)),
            EndpointSpec::Mock(path) => Arc::new(ScriptedMock::from_path(path).with_context(|| format!("loading mock script {}", path.display()))?),
        })
    }

    /// Mock embedding files hold `{"text": .., "embedding": [..]}` lines; a line
    /// without `text` sets the fallback vector.
    pub fn embedder(&self, api_key: Option<&str>, model: Option<&str>) -> Result<Arc<dyn EmbeddingEndpoint>> {
        #[derive(Deserialize)]
        struct Line {
            text: Option<String>,
            embedding: Vec<f32>,
        }
        Ok(match self {
            EndpointSpec::Http(url) => Arc::new(HttpEmbeddingEndpoint::new(url, api_key.map(String::from), model.map(String::from))),
            EndpointSpec::Mock(path) => {
                let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut mock = MockEmbeddingEndpoint::new();
                for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let l: Line = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
                    mock = match l.text {
                        Some(t) => mock.with(t, l.embedding),
                        None => mock.with_fallback(l.embedding),
                    };
                }
                Arc::new(mock)
            }
        })
    }
}
