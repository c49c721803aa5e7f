//! Published token-usage and effectiveness tables, checked in as CSV.

use anyhow::{Context, Result};
use deepsearch_core::ledger::TokenTotals;
use deepsearch_core::llm::ReasoningEffort;
use serde::Deserialize;

use crate::report::ConfigPoint;

pub const DEEP_SEARCH_TOKENS: &str = include_str!("../fixtures/deep_search_tokens.csv");
pub const ONESHOT_RERANK_TOKENS: &str = include_str!("../fixtures/oneshot_rerank_tokens.csv");
pub const DEEP_SEARCH_EFFECTIVENESS: &str = include_str!("../fixtures/deep_search_effectiveness.csv");

#[derive(Debug, Deserialize)]
struct DeepSearchTokensCsv {
    row: String,
    model: String,
    effort: String,
    depth: usize,
    search_input: f64,
    search_cached: f64,
    search_output: f64,
    search_reasoning: f64,
    rerank_input: Option<f64>,
    rerank_cached: Option<f64>,
    rerank_output: Option<f64>,
    rerank_reasoning: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepSearchTokens {
    pub row: String,
    pub model: String,
    pub effort: ReasoningEffort,
    pub depth: usize,
    pub search: TokenTotals,
    pub rerank: Option<TokenTotals>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct OneShotTokensCsv {
    pub row: String,
    pub model: String,
    pub effort: String,
    pub depth: usize,
    pub input: f64,
    pub cached: f64,
    pub output: f64,
    pub reasoning: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Effectiveness {
    pub row: String,
    pub model: String,
    pub effort: String,
    pub depth: usize,
    pub search_calls: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub accuracy_ci: f64,
    pub calibration: f64,
    pub calibration_ci: f64,
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing fixture {name}"))
}

pub fn deep_search_tokens() -> Result<Vec<DeepSearchTokens>> {
    parse::<DeepSearchTokensCsv>("deep_search_tokens", DEEP_SEARCH_TOKENS)?
        .into_iter()
        .map(|r| {
            let rerank = match (r.rerank_input, r.rerank_cached, r.rerank_output, r.rerank_reasoning) {
                (Some(i), Some(c), Some(o), Some(x)) => Some(TokenTotals::from_millions(i, c, o, x)),
                _ => None,
            };
            Ok(DeepSearchTokens {
                effort: r.effort.parse().map_err(anyhow::Error::msg)?,
                search: TokenTotals::from_millions(r.search_input, r.search_cached, r.search_output, r.search_reasoning),
                row: r.row,
                model: r.model,
                depth: r.depth,
                rerank,
            })
        })
        .collect()
}

pub fn oneshot_rerank_tokens() -> Result<Vec<(OneShotTokensCsv, TokenTotals)>> {
    Ok(parse::<OneShotTokensCsv>("oneshot_rerank_tokens", ONESHOT_RERANK_TOKENS)?
        .into_iter()
        .map(|r| {
            let t = TokenTotals::from_millions(r.input, r.cached, r.output, r.reasoning);
            (r, t)
        })
        .collect())
}

pub fn deep_search_effectiveness() -> Result<Vec<Effectiveness>> {
    parse("deep_search_effectiveness", DEEP_SEARCH_EFFECTIVENESS)
}

/// Deep-search configurations with their published recall and accuracy (points).
pub fn deep_search_points() -> Result<Vec<ConfigPoint>> {
    let eff = deep_search_effectiveness()?;
    deep_search_tokens()?
        .into_iter()
        .map(|t| {
            let e = eff.iter().find(|e| e.row == t.row).with_context(|| format!("no effectiveness row {}", t.row))?;
            Ok(ConfigPoint {
                label: t.row.clone(),
                effort: t.effort.to_string(),
                depth: t.depth,
                metrics: vec![("recall".into(), e.recall), ("accuracy".into(), e.accuracy)],
                search: t.search,
                rerank: t.rerank.unwrap_or_default(),
            })
        })
        .collect()
}

/// The no-reranking row sharing a row's model and effort: `(2c)` pairs with `(0c)`.
pub fn no_rerank_baseline<'a>(points: &'a [ConfigPoint], p: &ConfigPoint) -> Option<&'a ConfigPoint> {
    let suffix = &p.label[1..];
    if p.label.starts_with('0') {
        return None;
    }
    points.iter().find(|b| b.label.starts_with('0') && &b.label[1..] == suffix)
}
