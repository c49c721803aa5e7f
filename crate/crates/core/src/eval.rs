//! Retrieval metrics, end-to-end run recall, LLM-as-judge accuracy with
//! repetition-level confidence intervals, and calibration error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{FinalAnswer, RunTrace};
use crate::ledger::Ledger;
use crate::llm::{chat, CallContext, ChatEndpoint, ChatMessage, ChatRequest, ReasoningEffort, Stage};

/// z-score for a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;
pub const DEFAULT_JUDGE_REPETITIONS: usize = 5;
pub const CALIBRATION_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed query line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate qid {0:?}")]
    DuplicateQid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTask {
    pub qid: String,
    pub question: String,
    /// Reference answer used by the judge.
    pub answer: String,
    #[serde(default)]
    pub evidence_docids: BTreeSet<String>,
    #[serde(default)]
    pub gold_docids: BTreeSet<String>,
}

/// Which docid set counts as relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Evidence,
    Gold,
}

impl Relevance {
    pub fn as_str(self) -> &'static str {
        match self {
            Relevance::Evidence => "evidence",
            Relevance::Gold => "gold",
        }
    }
}

impl QueryTask {
    pub fn relevant(&self, which: Relevance) -> &BTreeSet<String> {
        match which {
            Relevance::Evidence => &self.evidence_docids,
            Relevance::Gold => &self.gold_docids,
        }
    }
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryTask>, EvalError> {
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let task: QueryTask = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if task.qid.is_empty() {
            return Err(EvalError::Malformed {
                line: idx + 1,
                message: "empty qid".into(),
            });
        }
        if !seen.insert(task.qid.clone()) {
            return Err(EvalError::DuplicateQid(task.qid));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// `|top-k ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| relevant.contains(d.as_ref()))
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-gain NDCG with `1/log2(rank + 1)` discounts; `None` when nothing is relevant.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, d)| relevant.contains(d.as_ref()))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    if ideal == 0.0 {
        return Some(0.0);
    }
    Some(dcg / ideal)
}

/// Fraction of `relevant` ever handed to the agent during the run.
pub fn run_recall(trace: &RunTrace, relevant: &BTreeSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hit = relevant
        .iter()
        .filter(|d| trace.retrieved_docids_union.contains(*d))
        .count();
    Some(hit as f64 / relevant.len() as f64)
}

/// Mean of the defined values, and how many were excluded as undefined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub ndcg_at_5: Option<f64>,
    pub ndcg_at_10: Option<f64>,
}

impl RetrievalScores {
    pub fn compute<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> Self {
        Self {
            recall_at_5: recall_at_k(ranked, relevant, 5),
            recall_at_10: recall_at_k(ranked, relevant, 10),
            ndcg_at_5: ndcg_at_k(ranked, relevant, 5),
            ndcg_at_10: ndcg_at_k(ranked, relevant, 10),
        }
    }
}

/// Per-query retrieval scores averaged over queries with a non-empty relevant set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub queries: usize,
    pub excluded: usize,
}

pub fn summarize_retrieval(scores: &[RetrievalScores]) -> RetrievalSummary {
    let (r5, excluded) = mean_defined(scores.iter().map(|s| s.recall_at_5));
    let (r10, _) = mean_defined(scores.iter().map(|s| s.recall_at_10));
    let (n5, _) = mean_defined(scores.iter().map(|s| s.ndcg_at_5));
    let (n10, _) = mean_defined(scores.iter().map(|s| s.ndcg_at_10));
    RetrievalSummary {
        recall_at_5: r5.unwrap_or(0.0),
        recall_at_10: r10.unwrap_or(0.0),
        ndcg_at_5: n5.unwrap_or(0.0),
        ndcg_at_10: n10.unwrap_or(0.0),
        queries: scores.len() - excluded,
        excluded,
    }
}

// --- judge -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub qid: String,
    /// 1-based repetition index.
    pub repetition: usize,
    pub correct: bool,
    pub extracted_answer: String,
    pub confidence: f64,
    pub raw_judge_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub fn build_judge_prompt(question: &str, response: &str, correct_answer: &str) -> String {
    format!(
        "Judge whether the following [response] to [question] is correct or not based on the precise and unambiguous [correct_answer] below.

[question]: {question}

[response]: {response}

[correct_answer]: {correct_answer}

Your judgement must be in the format and criteria specified below:

extracted_final_answer: The final exact answer extracted from the [response]. 

[correct_answer]: Repeat the [correct_answer] given above.

reasoning: Explain why the extracted_final_answer is correct or incorrect based on [correct_answer], in the context of this [question]. You should judge whether the extracted_final_answer is semantically equivalent to [correct_answer], allowing the extracted_final_answer to be string variations of [correct_answer]. You should also allow the extracted_final_answer to be more precise or verbose than [correct_answer], as long as its additional details are correct. Do not comment on any background to the problem, do not attempt to solve the problem, do not argue for any answer different than [correct_answer], focus only on whether the answers are semantically equivalent.

correct: Answer 'yes' if extracted_final_answer matches the [correct_answer] given above, or is within a small margin of error for numerical problems. Answer 'no' otherwise, i.e. if there if there is any inconsistency, ambiguity, non-equivalency, or if the extracted answer is incorrect.

confidence: The extracted confidence score between 0% and 100% from [response]. Put 100 if there is no confidence score available."
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeParse {
    pub correct: bool,
    pub extracted_answer: String,
    pub confidence: f64,
    pub flags: Vec<String>,
}

fn judge_field_re(field: &str) -> Regex {
    Regex::new(&format!(r"(?im)^[\s*#>-]*{field}[\s*]*:[\s*]*(.*)$")).expect("valid regex")
}

/// Reads the judge's `correct:`, `extracted_final_answer:` and `confidence:` fields.
///
/// Only an exact `yes` (case-insensitive) counts as correct; a missing field is
/// judged incorrect and flagged. A missing confidence defaults to 100.
pub fn parse_judge_reply(text: &str) -> JudgeParse {
    static CORRECT: OnceLock<Regex> = OnceLock::new();
    static EXTRACTED: OnceLock<Regex> = OnceLock::new();
    static CONFIDENCE: OnceLock<Regex> = OnceLock::new();
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let correct_re = CORRECT.get_or_init(|| judge_field_re("correct"));
    let extracted_re = EXTRACTED.get_or_init(|| judge_field_re("extracted_final_answer"));
    let confidence_re = CONFIDENCE.get_or_init(|| judge_field_re("confidence"));
    let number_re = NUMBER.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("valid regex"));

    let last = |re: &Regex| re.captures_iter(text).last().map(|c| c[1].trim().to_string());
    let mut flags = Vec::new();
    let correct = match last(correct_re) {
        Some(v) => {
            let word = v
                .trim_matches(|c: char| !c.is_alphanumeric())
                .split_whitespace()
                .next()
                .unwrap_or("")
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_ascii_lowercase();
            word == "yes"
        }
        None => {
            flags.push("judge_correct_missing".to_string());
            false
        }
    };
    let extracted_answer = last(extracted_re).unwrap_or_default();
    let confidence = match last(confidence_re).and_then(|v| number_re.find(&v).map(|m| m.as_str().to_string())) {
        Some(num) => {
            let v: f64 = num.parse().unwrap_or(100.0);
            let c = v / 100.0;
            if !(0.0..=1.0).contains(&c) {
                flags.push("judge_confidence_clamped".to_string());
            }
            c.clamp(0.0, 1.0)
        }
        None => 1.0,
    };
    JudgeParse {
        correct,
        extracted_answer,
        confidence,
        flags,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub model: String,
    pub repetitions: usize,
    pub reasoning_effort: Option<ReasoningEffort>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            model: "judge".into(),
            repetitions: DEFAULT_JUDGE_REPETITIONS,
            reasoning_effort: None,
            max_output_tokens: 4096,
            temperature: 0.0,
        }
    }
}

/// Grades one run `repetitions` times. Runs without a final answer get incorrect
/// verdicts without any judge call.
pub fn judge_run(task: &QueryTask, final_answer: Option<&FinalAnswer>, judge: &dyn ChatEndpoint, config: &JudgeConfig, ledger: &Ledger) -> Vec<JudgeVerdict> {
    let Some(answer) = final_answer else {
        return (1..=config.repetitions)
            .map(|repetition| JudgeVerdict {
                qid: task.qid.clone(),
                repetition,
                correct: false,
                extracted_answer: String::new(),
                confidence: 1.0,
                raw_judge_text: String::new(),
                flags: vec!["no_final_answer".into()],
            })
            .collect();
    };
    let prompt = build_judge_prompt(&task.question, &answer.response, &task.answer);
    let mut request = ChatRequest::new(config.model.clone(), vec![ChatMessage::user(prompt)], config.max_output_tokens);
    request.reasoning_effort = config.reasoning_effort;
    request.temperature = config.temperature;
    let ctx = CallContext {
        qid: &task.qid,
        stage: Stage::Judge,
    };
    (1..=config.repetitions)
        .map(|repetition| match chat(judge, &request, ctx, ledger) {
            Ok(out) => {
                let parsed = parse_judge_reply(&out.message.content);
                JudgeVerdict {
                    qid: task.qid.clone(),
                    repetition,
                    correct: parsed.correct,
                    extracted_answer: parsed.extracted_answer,
                    confidence: parsed.confidence,
                    raw_judge_text: out.message.content,
                    flags: parsed.flags,
                }
            }
            Err(e) => JudgeVerdict {
                qid: task.qid.clone(),
                repetition,
                correct: false,
                extracted_answer: String::new(),
                confidence: answer.confidence,
                raw_judge_text: String::new(),
                flags: vec![format!("judge_error:{e}")],
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// `1.96 * s / sqrt(R)` with the sample standard deviation `s`; `None` for `R < 2`.
    pub halfwidth: Option<f64>,
}

/// Mean and normal-approximation 95% half-width over repetition-level values.
pub fn mean_with_ci(values: &[f64]) -> MeanCi {
    let r = values.len();
    if r == 0 {
        return MeanCi {
            mean: 0.0,
            halfwidth: None,
        };
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    let halfwidth = (r >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        Z_95 * var.sqrt() / (r as f64).sqrt()
    });
    MeanCi { mean, halfwidth }
}

/// Verdicts grouped by repetition index (ascending).
pub fn group_by_repetition(verdicts: &[JudgeVerdict]) -> BTreeMap<usize, Vec<&JudgeVerdict>> {
    let mut groups: BTreeMap<usize, Vec<&JudgeVerdict>> = BTreeMap::new();
    for v in verdicts {
        groups.entry(v.repetition).or_default().push(v);
    }
    groups
}

/// Accuracy per repetition over all queries, then mean and CI across repetitions.
pub fn accuracy_with_ci(verdicts: &[JudgeVerdict]) -> MeanCi {
    let per_rep: Vec<f64> = group_by_repetition(verdicts)
        .values()
        .map(|vs| vs.iter().filter(|v| v.correct).count() as f64 / vs.len() as f64)
        .collect();
    mean_with_ci(&per_rep)
}

/// Expected calibration error over `bins` equal-width confidence bins on [0, 1].
pub fn calibration_error_binned(pairs: &[(f64, bool)], bins: usize) -> f64 {
    assert!(bins > 0, "need at least one bin");
    if pairs.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for &(c, ok) in pairs {
        let c = c.clamp(0.0, 1.0);
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(ok);
    }
    let n = pairs.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (conf_sum[b] / nb - correct[b] as f64 / nb).abs()
        })
        .sum()
}

pub fn calibration_error(pairs: &[(f64, bool)]) -> f64 {
    calibration_error_binned(pairs, CALIBRATION_BINS)
}

/// Calibration error per repetition, then mean and CI across repetitions.
pub fn calibration_with_ci(verdicts: &[JudgeVerdict]) -> MeanCi {
    let per_rep: Vec<f64> = group_by_repetition(verdicts)
        .values()
        .map(|vs| {
            let pairs: Vec<(f64, bool)> = vs.iter().map(|v| (v.confidence, v.correct)).collect();
            calibration_error(&pairs)
        })
        .collect();
    mean_with_ci(&per_rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub qid: String,
    pub search_calls: usize,
    pub run_recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub answered: bool,
}

/// Aggregate end-to-end metrics for one configuration. Rates are in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub relevance: Relevance,
    pub run_recall: f64,
    pub recall_excluded: usize,
    pub search_calls_mean: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_ci_halfwidth: Option<f64>,
    pub calibration_error: Option<f64>,
    pub calibration_ci_halfwidth: Option<f64>,
    pub calibration_bins: usize,
    pub repetitions: usize,
    pub per_query: Vec<QueryMetrics>,
}

/// Joins traces with judge verdicts (may be empty) for the tasks in `tasks`.
pub fn summarize_runs(tasks: &[QueryTask], traces: &BTreeMap<String, RunTrace>, verdicts: &[JudgeVerdict], relevance: Relevance) -> MetricsReport {
    let mut per_query = Vec::new();
    for task in tasks {
        let Some(trace) = traces.get(&task.qid) else {
            continue;
        };
        let mine: Vec<&JudgeVerdict> = verdicts.iter().filter(|v| v.qid == task.qid).collect();
        let accuracy = (!mine.is_empty()).then(|| mine.iter().filter(|v| v.correct).count() as f64 / mine.len() as f64);
        per_query.push(QueryMetrics {
            qid: task.qid.clone(),
            search_calls: trace.search_calls,
            run_recall: run_recall(trace, task.relevant(relevance)),
            accuracy,
            answered: trace.final_answer.is_some(),
        });
    }
    let (recall, recall_excluded) = mean_defined(per_query.iter().map(|q| q.run_recall));
    let search_calls_mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|q| q.search_calls as f64).sum::<f64>() / per_query.len() as f64
    };
    let judged: Vec<JudgeVerdict> = verdicts
        .iter()
        .filter(|v| traces.contains_key(&v.qid))
        .cloned()
        .collect();
    let (acc, cal) = if judged.is_empty() {
        (None, None)
    } else {
        (Some(accuracy_with_ci(&judged)), Some(calibration_with_ci(&judged)))
    };
    MetricsReport {
        queries: per_query.len(),
        relevance,
        run_recall: recall.unwrap_or(0.0),
        recall_excluded,
        search_calls_mean,
        accuracy_mean: acc.map(|a| a.mean),
        accuracy_ci_halfwidth: acc.and_then(|a| a.halfwidth),
        calibration_error: cal.map(|c| c.mean),
        calibration_ci_halfwidth: cal.and_then(|c| c.halfwidth),
        calibration_bins: CALIBRATION_BINS,
        repetitions: group_by_repetition(&judged).len(),
        per_query,
    }
}
