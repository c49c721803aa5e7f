//! Joins run metrics with token ledgers into ETC grids and delta-efficiency rows.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use deepsearch_core::eval::{summarize_runs, MetricsReport, Relevance};
use deepsearch_core::ledger::{aggregate_stage, delta_efficiency, etc_grid, read_usage_jsonl, EtcParams, TokenTotals};
use deepsearch_core::llm::Stage;
use serde::Serialize;

use crate::judge::{read_judge_usage, read_verdicts};
use crate::rundir::{read_config, read_traces, write_atomic, USAGE_FILE};

/// ETC deltas are reported per this many effective tokens.
pub const DEFAULT_ETC_UNIT: f64 = 1e6;

/// One configuration as seen by the report: metrics in points (x100) plus token totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigPoint {
    pub label: String,
    pub effort: String,
    pub depth: usize,
    pub metrics: Vec<(String, f64)>,
    pub search: TokenTotals,
    pub rerank: TokenTotals,
}

impl ConfigPoint {
    pub fn combined(&self) -> TokenTotals {
        self.search + self.rerank
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == name).map(|m| m.1)
    }

    fn scope(&self, scope: &str) -> TokenTotals {
        match scope {
            "search" => self.search,
            "rerank" => self.rerank,
            _ => self.combined(),
        }
    }
}

pub const SCOPES: [&str; 3] = ["search", "rerank", "combined"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtcRow {
    pub run: String,
    pub scope: String,
    pub alpha: f64,
    pub beta: f64,
    pub etc_effective_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub run: String,
    pub baseline: String,
    pub metric: String,
    pub alpha: f64,
    pub beta: f64,
    pub metric_delta: f64,
    pub etc_delta: f64,
    pub slope: Option<f64>,
    pub dominating: bool,
}

pub fn etc_rows(points: &[ConfigPoint], alphas: &[f64], betas: &[f64]) -> Result<Vec<EtcRow>> {
    let mut out = Vec::new();
    for p in points {
        for scope in SCOPES {
            for cell in etc_grid(&p.scope(scope), alphas, betas)? {
                out.push(EtcRow {
                    run: p.label.clone(),
                    scope: scope.into(),
                    alpha: cell.alpha,
                    beta: cell.beta,
                    etc_effective_tokens: cell.etc,
                });
            }
        }
    }
    Ok(out)
}

/// Delta rows over the combined (search + rerank) scope for every metric both
/// points share, one per grid cell.
pub fn delta_rows<'a>(points: &'a [ConfigPoint], baseline_of: impl Fn(&ConfigPoint) -> Option<&'a ConfigPoint>, alphas: &[f64], betas: &[f64], unit: f64) -> Result<Vec<DeltaRow>> {
    let mut out = Vec::new();
    for p in points {
        let Some(base) = baseline_of(p) else { continue };
        for (name, value) in &p.metrics {
            let Some(b) = base.metric(name) else { continue };
            for &alpha in alphas {
                for &beta in betas {
                    let d = delta_efficiency((b, &base.combined()), (*value, &p.combined()), EtcParams::new(alpha, beta)?, unit)?;
                    out.push(DeltaRow {
                        run: p.label.clone(),
                        baseline: base.label.clone(),
                        metric: name.clone(),
                        alpha,
                        beta,
                        metric_delta: d.metric_delta,
                        etc_delta: d.etc_delta,
                        slope: d.slope,
                        dominating: d.dominating,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Everything the report needs from one run directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub point: ConfigPoint,
    pub metrics: MetricsReport,
    pub judge: TokenTotals,
}

pub fn summarize_run_dir(dir: &Path, relevance: Relevance) -> Result<RunSummary> {
    let config = read_config(dir).with_context(|| format!("{} is not a run directory", dir.display()))?;
    let tasks = config.load_tasks()?;
    let traces = read_traces(dir)?;
    ensure!(!traces.is_empty(), "{} has no completed traces", dir.display());
    let verdicts = read_verdicts(dir)?;
    let usage_path = dir.join(USAGE_FILE);
    let usage = if usage_path.exists() { read_usage_jsonl(&usage_path)? } else { Vec::new() };
    let metrics = summarize_runs(&tasks, &traces, &verdicts, relevance);
    let mut m = vec![
        ("recall".to_string(), metrics.run_recall * 100.0),
        ("search_calls".to_string(), metrics.search_calls_mean),
    ];
    if let Some(a) = metrics.accuracy_mean {
        m.push(("accuracy".into(), a * 100.0));
    }
    if let Some(c) = metrics.calibration_error {
        m.push(("calibration_error".into(), c * 100.0));
    }
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        point: ConfigPoint {
            label: config.label.clone(),
            effort: config.agent.reasoning_effort.to_string(),
            depth: config.agent.rerank.depth,
            metrics: m,
            search: aggregate_stage(&usage, Stage::Search),
            rerank: aggregate_stage(&usage, Stage::Rerank),
        },
        metrics,
        judge: aggregate_stage(&read_judge_usage(dir)?, Stage::Judge),
    })
}

pub struct Report {
    pub runs: Vec<RunSummary>,
    pub etc: Vec<EtcRow>,
    pub deltas: Vec<DeltaRow>,
}

pub fn build_report(runs: Vec<RunSummary>, baseline: &str, alphas: &[f64], betas: &[f64], unit: f64) -> Result<Report> {
    let points: Vec<ConfigPoint> = runs.iter().map(|r| r.point.clone()).collect();
    for (i, p) in points.iter().enumerate() {
        if points[..i].iter().any(|q| q.label == p.label) {
            bail!("run label {:?} appears twice; labels must be unique", p.label);
        }
    }
    let Some(base) = points.iter().find(|p| p.label == baseline) else {
        bail!("baseline {baseline:?} is not among the runs");
    };
    let etc = etc_rows(&points, alphas, betas)?;
    let deltas = delta_rows(&points, |_| Some(base), alphas, betas, unit)?;
    Ok(Report { runs, etc, deltas })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn etc_csv(rows: &[EtcRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["run", "scope", "alpha", "beta", "etc_effective_tokens"],
        rows.iter().map(|r| vec![r.run.clone(), r.scope.clone(), r.alpha.to_string(), r.beta.to_string(), format!("{:.1}", r.etc_effective_tokens)]),
    )
}

pub fn deltas_csv(rows: &[DeltaRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["run", "baseline", "metric", "alpha", "beta", "metric_delta", "etc_delta", "slope", "dominating"],
        rows.iter().map(|r| {
            vec![
                r.run.clone(),
                r.baseline.clone(),
                r.metric.clone(),
                r.alpha.to_string(),
                r.beta.to_string(),
                format!("{:.4}", r.metric_delta),
                format!("{:.6}", r.etc_delta),
                opt(r.slope),
                r.dominating.to_string(),
            ]
        }),
    )
}

/// Plot-ready points: x is the ETC delta per unit, y the metric delta.
pub fn plot_csv(rows: &[DeltaRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["run", "metric", "alpha", "beta", "x_etc_delta", "y_metric_delta"],
        rows.iter().map(|r| vec![r.run.clone(), r.metric.clone(), r.alpha.to_string(), r.beta.to_string(), format!("{:.6}", r.etc_delta), format!("{:.4}", r.metric_delta)]),
    )
}

pub fn runs_csv(runs: &[RunSummary]) -> Result<Vec<u8>> {
    let header = [
        "run",
        "effort",
        "rerank_depth",
        "queries",
        "search_calls",
        "recall",
        "recall_excluded",
        "accuracy",
        "accuracy_ci",
        "calibration_error",
        "calibration_ci",
        "calibration_bins",
        "repetitions",
        "search_input",
        "search_cached",
        "search_output",
        "search_reasoning",
        "rerank_input",
        "rerank_cached",
        "rerank_output",
        "rerank_reasoning",
        "judge_input",
        "judge_output",
    ];
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default();
    csv_bytes(
        &header,
        runs.iter().map(|r| {
            let m = &r.metrics;
            let (s, k) = (r.point.search, r.point.rerank);
            vec![
                r.point.label.clone(),
                r.point.effort.clone(),
                r.point.depth.to_string(),
                m.queries.to_string(),
                format!("{:.2}", m.search_calls_mean),
                pct(Some(m.run_recall)),
                m.recall_excluded.to_string(),
                pct(m.accuracy_mean),
                pct(m.accuracy_ci_halfwidth),
                pct(m.calibration_error),
                pct(m.calibration_ci_halfwidth),
                m.calibration_bins.to_string(),
                m.repetitions.to_string(),
                s.input_total().to_string(),
                s.input_cached.to_string(),
                s.output_total.to_string(),
                s.output_reasoning.to_string(),
                k.input_total().to_string(),
                k.input_cached.to_string(),
                k.output_total.to_string(),
                k.output_reasoning.to_string(),
                r.judge.input_total().to_string(),
                r.judge.output_total.to_string(),
            ]
        }),
    )
}

/// Writes report.csv, etc.csv, deltas.csv, plot.csv and per_query.jsonl into `out`.
pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_atomic(&out.join("report.csv"), &runs_csv(&report.runs)?)?;
    write_atomic(&out.join("etc.csv"), &etc_csv(&report.etc)?)?;
    write_atomic(&out.join("deltas.csv"), &deltas_csv(&report.deltas)?)?;
    write_atomic(&out.join("plot.csv"), &plot_csv(&report.deltas)?)?;
    let mut per_query = String::new();
    for r in &report.runs {
        for q in &r.metrics.per_query {
            let mut v = serde_json::to_value(q)?;
            v["run"] = serde_json::Value::String(r.point.label.clone());
            per_query.push_str(&v.to_string());
            per_query.push('\n');
        }
    }
    write_atomic(&out.join("per_query.jsonl"), per_query.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(label: &str, recall: f64, output: u64) -> ConfigPoint {
        ConfigPoint {
            label: label.into(),
            effort: "low".into(),
            depth: 0,
            metrics: vec![("recall".into(), recall)],
            search: TokenTotals {
                input_noncached: 1_000_000,
                output_total: output,
                ..TokenTotals::default()
            },
            rerank: TokenTotals::default(),
        }
    }

    #[test]
    fn deltas_against_baseline() {
        let points = vec![point("base", 10.0, 0), point("more", 14.0, 1_000_000)];
        let rows = delta_rows(&points, |_| Some(&points[0]), &[0.1], &[3.0], 1e6).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].metric_delta, rows[0].etc_delta, rows[0].slope), (0.0, 0.0, None));
        assert_eq!((rows[1].metric_delta, rows[1].etc_delta), (4.0, 3.0));
        assert!(!rows[1].dominating);
        assert_eq!(etc_rows(&points, &[0.1, 0.5], &[3.0]).unwrap().len(), 2 * 3 * 2);
    }
}
