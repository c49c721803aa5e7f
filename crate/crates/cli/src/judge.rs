//! Grades the completed traces of a run directory with an LLM judge.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{Context, Result};
use deepsearch_core::eval::{judge_run, JudgeConfig, JudgeVerdict};
use deepsearch_core::ledger::{read_usage_jsonl, Ledger};
use deepsearch_core::llm::{ChatEndpoint, UsageRecord};

use crate::rundir::{read_config, read_traces, JUDGE_DIR, USAGE_FILE, VERDICTS_FILE};

pub fn read_verdicts(run: &Path) -> Result<Vec<JudgeVerdict>> {
    let path = run.join(JUDGE_DIR).join(VERDICTS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn read_judge_usage(run: &Path) -> Result<Vec<UsageRecord>> {
    let path = run.join(JUDGE_DIR).join(USAGE_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_usage_jsonl(&path)?)
}

struct Sinks {
    verdicts: fs::File,
    usage: fs::File,
}

impl Sinks {
    /// Appends one query's verdicts and usage; usage first so a crash never leaves
    /// verdicts without their cost.
    fn write(&mut self, verdicts: &[JudgeVerdict], usage: &[UsageRecord]) -> Result<()> {
        let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
        self.usage
            .write_all(lines(usage.iter().map(|u| serde_json::to_string(u).unwrap()).collect()).as_bytes())?;
        self.usage.flush()?;
        self.verdicts
            .write_all(lines(verdicts.iter().map(|v| serde_json::to_string(v).unwrap()).collect()).as_bytes())?;
        self.verdicts.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JudgeOutcome {
    pub judged: Vec<String>,
    pub skipped: Vec<String>,
}

/// Judges every completed trace not yet present in `judge/verdicts.jsonl`.
pub fn cmd_judge(run: &Path, judge: &dyn ChatEndpoint, config: &JudgeConfig, concurrency: usize) -> Result<JudgeOutcome> {
    let exp = read_config(run)?;
    let tasks = exp.load_tasks()?;
    let traces = read_traces(run)?;
    let already: BTreeSet<String> = read_verdicts(run)?.into_iter().map(|v| v.qid).collect();
    let dir = run.join(JUDGE_DIR);
    fs::create_dir_all(&dir)?;
    let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
    let sinks = Mutex::new(Sinks {
        verdicts: open(VERDICTS_FILE)?,
        usage: open(USAGE_FILE)?,
    });

    let mut outcome = JudgeOutcome::default();
    let mut todo = Vec::new();
    for task in &tasks {
        let Some(trace) = traces.get(&task.qid) else { continue };
        if already.contains(&task.qid) {
            outcome.skipped.push(task.qid.clone());
        } else {
            todo.push((task, trace));
        }
    }
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    thread::scope(|s| {
        for _ in 0..concurrency.clamp(1, todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((task, trace)) = todo.get(i) else { break };
                let ledger = Ledger::new();
                let verdicts = judge_run(task, trace.final_answer.as_ref(), judge, config, &ledger);
                if let Err(e) = sinks.lock().unwrap().write(&verdicts, &ledger.records()) {
                    errors.lock().unwrap().push(format!("{}: {e:#}", task.qid));
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        anyhow::bail!("writing judge output failed: {e}");
    }
    outcome.judged = todo.iter().map(|(t, _)| t.qid.clone()).collect();
    Ok(outcome)
}
