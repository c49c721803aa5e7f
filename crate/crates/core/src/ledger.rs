//! Append-only token accounting and Effective Token Cost.
//!
//! ETC weights the three token classes of a workload:
//!
//! ```text
//! ETC = input_noncached + alpha * input_cached + beta * output_total
//! ```
//!
//! `alpha` discounts prefix-cached input, `beta` is the premium on generated
//! output. Reasoning tokens are part of `output_total` and carry no extra weight;
//! `output_reasoning` is kept for reporting only.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ReportedUsage, Stage, UsageRecord};

pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_BETAS: [f64; 3] = [3.0, 5.0, 7.0];

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed usage record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("usage record on line {0} has cached > input or reasoning > output")]
    Inconsistent(usize),
    #[error("alpha must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("beta must be >= 1, got {0}")]
    InvalidBeta(f64),
    #[error("ETC grid needs at least one alpha and one beta")]
    EmptyGrid,
    #[error("delta unit must be positive, got {0}")]
    InvalidUnit(f64),
}

struct LedgerState {
    records: Vec<UsageRecord>,
    next_seq: HashMap<String, u64>,
    sink: Option<(String, File)>,
}

/// Thread-safe append-only store of [`UsageRecord`]s, optionally mirrored to a JSONL file.
pub struct Ledger {
    state: Mutex<LedgerState>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(LedgerState {
                records: Vec::new(),
                next_seq: HashMap::new(),
                sink: None,
            }),
        }
    }

    /// Opens `path` for appending. Existing records are loaded so `call_seq`
    /// numbering continues per qid.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let existing = if path.exists() {
            read_usage_jsonl(path)?
        } else {
            Vec::new()
        };
        let io = |source| LedgerError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let mut next_seq = HashMap::new();
        for r in &existing {
            let n = next_seq.entry(r.qid.clone()).or_insert(0);
            *n = (*n).max(r.call_seq + 1);
        }
        Ok(Self {
            state: Mutex::new(LedgerState {
                records: existing,
                next_seq,
                sink: Some((path.display().to_string(), file)),
            }),
        })
    }

    /// Records one call, assigning the next `call_seq` for `qid`.
    pub fn append(&self, qid: &str, stage: Stage, usage: ReportedUsage) -> UsageRecord {
        let mut st = self.state.lock().unwrap();
        let seq = st.next_seq.entry(qid.to_string()).or_insert(0);
        let record = UsageRecord {
            qid: qid.to_string(),
            stage,
            call_seq: *seq,
            input_total: usage.input_total,
            input_cached: usage.input_cached.min(usage.input_total),
            output_total: usage.output_total,
            output_reasoning: usage.output_reasoning.min(usage.output_total),
            estimated: usage.estimated,
        };
        *seq += 1;
        st.push(record.clone());
        record
    }

    /// Appends already-numbered records, e.g. a finished query's buffer, in one locked step.
    pub fn extend(&self, records: &[UsageRecord]) -> Result<(), LedgerError> {
        let mut st = self.state.lock().unwrap();
        if let Some((path, file)) = st.sink.as_mut() {
            let mut buf = String::new();
            for r in records {
                buf.push_str(&serde_json::to_string(r).expect("usage record serializes"));
                buf.push('\n');
            }
            file.write_all(buf.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| LedgerError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        for r in records {
            let n = st.next_seq.entry(r.qid.clone()).or_insert(0);
            *n = (*n).max(r.call_seq + 1);
            st.records.push(r.clone());
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.state.lock().unwrap().records.clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LedgerState {
    fn push(&mut self, record: UsageRecord) {
        if let Some((path, file)) = self.sink.as_mut() {
            let line = serde_json::to_string(&record).expect("usage record serializes");
            if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                log::error!("failed to persist usage record to {path}: {e}");
            }
        }
        self.records.push(record);
    }
}

pub fn read_usage_jsonl(path: &Path) -> Result<Vec<UsageRecord>, LedgerError> {
    let file = File::open(path).map_err(|source| LedgerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LedgerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let r: UsageRecord = serde_json::from_str(&line).map_err(|e| LedgerError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if r.input_cached > r.input_total || r.output_reasoning > r.output_total {
            return Err(LedgerError::Inconsistent(idx + 1));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub input_noncached: u64,
    pub input_cached: u64,
    pub output_total: u64,
    pub output_reasoning: u64,
    pub call_count: u64,
}

impl TokenTotals {
    /// Totals from table-style figures in millions of tokens, where `input` includes
    /// `cached` and `output` includes `reasoning`.
    pub fn from_millions(input: f64, cached: f64, output: f64, reasoning: f64) -> Self {
        let tokens = |m: f64| (m * 1e6).round() as u64;
        Self {
            input_noncached: tokens(input) - tokens(cached),
            input_cached: tokens(cached),
            output_total: tokens(output),
            output_reasoning: tokens(reasoning),
            call_count: 0,
        }
    }

    pub fn input_total(&self) -> u64 {
        self.input_noncached + self.input_cached
    }

    pub fn raw_total(&self) -> u64 {
        self.input_total() + self.output_total
    }

    pub fn scale(&self, s: u64) -> Self {
        Self {
            input_noncached: self.input_noncached * s,
            input_cached: self.input_cached * s,
            output_total: self.output_total * s,
            output_reasoning: self.output_reasoning * s,
            call_count: self.call_count * s,
        }
    }

    fn add_record(&mut self, r: &UsageRecord) {
        self.input_noncached += r.input_total - r.input_cached;
        self.input_cached += r.input_cached;
        self.output_total += r.output_total;
        self.output_reasoning += r.output_reasoning;
        self.call_count += 1;
    }
}

impl Add for TokenTotals {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for TokenTotals {
    fn add_assign(&mut self, rhs: Self) {
        self.input_noncached += rhs.input_noncached;
        self.input_cached += rhs.input_cached;
        self.output_total += rhs.output_total;
        self.output_reasoning += rhs.output_reasoning;
        self.call_count += rhs.call_count;
    }
}

impl Sum for TokenTotals {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Sums the records matching `filter`.
pub fn aggregate<'a, I, F>(records: I, filter: F) -> TokenTotals
where
    I: IntoIterator<Item = &'a UsageRecord>,
    F: Fn(&UsageRecord) -> bool,
{
    let mut totals = TokenTotals::default();
    for r in records.into_iter().filter(|r| filter(r)) {
        totals.add_record(r);
    }
    totals
}

pub fn aggregate_stage(records: &[UsageRecord], stage: Stage) -> TokenTotals {
    aggregate(records, |r| r.stage == stage)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtcParams {
    pub alpha: f64,
    pub beta: f64,
}

impl EtcParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LedgerError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LedgerError::InvalidAlpha(alpha));
        }
        if !(beta >= 1.0) {
            return Err(LedgerError::InvalidBeta(beta));
        }
        Ok(Self { alpha, beta })
    }
}

/// Effective tokens for `totals` under `params`.
pub fn etc(totals: &TokenTotals, params: EtcParams) -> f64 {
    totals.input_noncached as f64 + params.alpha * totals.input_cached as f64 + params.beta * totals.output_total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtcCell {
    pub alpha: f64,
    pub beta: f64,
    pub etc: f64,
}

/// ETC for every `(alpha, beta)` pair, alpha-major.
pub fn etc_grid(totals: &TokenTotals, alphas: &[f64], betas: &[f64]) -> Result<Vec<EtcCell>, LedgerError> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(LedgerError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let params = EtcParams::new(alpha, beta)?;
            out.push(EtcCell {
                alpha,
                beta,
                etc: etc(totals, params),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEfficiency {
    pub metric_delta: f64,
    /// `(etc(variant) - etc(baseline)) / unit`.
    pub etc_delta: f64,
    /// `metric_delta / etc_delta`; `None` when the ETC delta is zero.
    pub slope: Option<f64>,
    /// Better metric at lower cost.
    pub dominating: bool,
}

/// Metric gain of `variant` over `baseline` per `unit` effective tokens.
pub fn delta_efficiency(
    baseline: (f64, &TokenTotals),
    variant: (f64, &TokenTotals),
    params: EtcParams,
    unit: f64,
) -> Result<DeltaEfficiency, LedgerError> {
    if !(unit > 0.0) {
        return Err(LedgerError::InvalidUnit(unit));
    }
    let metric_delta = variant.0 - baseline.0;
    let etc_delta = (etc(variant.1, params) - etc(baseline.1, params)) / unit;
    let slope = (etc_delta != 0.0).then(|| metric_delta / etc_delta);
    Ok(DeltaEfficiency {
        metric_delta,
        etc_delta,
        slope,
        dominating: metric_delta > 0.0 && etc_delta < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(qid: &str, stage: Stage, input: u64, cached: u64, output: u64) -> UsageRecord {
        UsageRecord {
            qid: qid.into(),
            stage,
            call_seq: 0,
            input_total: input,
            input_cached: cached,
            output_total: output,
            output_reasoning: 0,
            estimated: false,
        }
    }

    #[test]
    fn aggregate_two_records() {
        let records = [rec("a", Stage::Search, 100, 40, 10), rec("a", Stage::Search, 50, 0, 5)];
        let t = aggregate(&records, |_| true);
        assert_eq!((t.input_noncached, t.input_cached, t.output_total, t.call_count), (110, 40, 15, 2));
    }

    #[test]
    fn aggregate_empty_filter() {
        let records = [rec("a", Stage::Search, 100, 40, 10)];
        assert_eq!(aggregate(&records, |r| r.stage == Stage::Judge), TokenTotals::default());
    }

    #[test]
    fn unit_weights_give_raw_total() {
        let t = TokenTotals {
            input_noncached: 60,
            input_cached: 40,
            output_total: 15,
            output_reasoning: 5,
            call_count: 2,
        };
        assert_eq!(etc(&t, EtcParams::new(1.0, 1.0).unwrap()), 115.0);
        assert_eq!(etc(&TokenTotals::default(), EtcParams::new(0.1, 3.0).unwrap()), 0.0);
    }

    #[test]
    fn etc_params_validation() {
        assert!(EtcParams::new(0.0, 3.0).is_err());
        assert!(EtcParams::new(1.5, 3.0).is_err());
        assert!(EtcParams::new(0.5, 0.5).is_err());
        assert!(EtcParams::new(f64::NAN, 3.0).is_err());
    }

    #[test]
    fn grid_shape_and_errors() {
        let t = TokenTotals::from_millions(9.09, 4.29, 0.37, 0.22);
        let grid = etc_grid(&t, &DEFAULT_ALPHAS, &DEFAULT_BETAS).unwrap();
        assert_eq!(grid.len(), 9);
        assert!(matches!(etc_grid(&t, &[], &DEFAULT_BETAS), Err(LedgerError::EmptyGrid)));
    }

    #[test]
    fn self_delta_is_undefined_slope() {
        let t = TokenTotals::from_millions(1.0, 0.5, 0.1, 0.0);
        let p = EtcParams::new(0.1, 3.0).unwrap();
        let d = delta_efficiency((0.4, &t), (0.4, &t), p, 1e6).unwrap();
        assert_eq!((d.metric_delta, d.etc_delta, d.slope, d.dominating), (0.0, 0.0, None, false));
        assert!(delta_efficiency((0.4, &t), (0.4, &t), p, 0.0).is_err());
    }

    #[test]
    fn ledger_numbers_calls_per_qid() {
        let ledger = Ledger::new();
        let u = ReportedUsage::default();
        assert_eq!(ledger.append("a", Stage::Search, u).call_seq, 0);
        assert_eq!(ledger.append("b", Stage::Search, u).call_seq, 0);
        assert_eq!(ledger.append("a", Stage::Rerank, u).call_seq, 1);
    }

    #[test]
    fn ledger_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("usage.jsonl");
        {
            let ledger = Ledger::open(&path).unwrap();
            ledger.append(
                "q",
                Stage::Search,
                ReportedUsage {
                    input_total: 10,
                    input_cached: 4,
                    output_total: 3,
                    output_reasoning: 1,
                    estimated: false,
                },
            );
        }
        let reopened = Ledger::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        let r = reopened.append("q", Stage::Judge, ReportedUsage::default());
        assert_eq!(r.call_seq, 1);
        assert_eq!(read_usage_jsonl(&path).unwrap().len(), 2);
    }
}
