//! Batch agent runs over a query set, resumable at query granularity.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use anyhow::{bail, Context, Result};
use deepsearch_core::agent::Agent;
use deepsearch_core::eval::QueryTask;
use deepsearch_core::ledger::{read_usage_jsonl, Ledger};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::rundir::{failed_path, read_traces, trace_path, write_atomic, CONFIG_FILE, USAGE_FILE};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutcome {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
}

/// Writes `config.json`, or checks that an existing one describes the same experiment.
pub fn prepare_run_dir(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = ExperimentConfig::load(&path)?;
        if !existing.same_experiment(config) {
            bail!("{} holds a different experiment configuration", dir.display());
        }
        if existing.endpoints != config.endpoints {
            log::warn!("endpoints differ from the recorded configuration; keeping the original config.json");
        }
        return Ok(());
    }
    write_atomic(&path, serde_json::to_string_pretty(config)?.as_bytes())
}

/// Drops usage records of queries without a completed trace (left by an interrupted run).
fn prune_orphan_usage(path: &Path, completed: &BTreeSet<String>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let records = read_usage_jsonl(path)?;
    let kept: Vec<_> = records.iter().filter(|r| completed.contains(&r.qid)).collect();
    if kept.len() == records.len() {
        return Ok(());
    }
    log::warn!("pruning {} usage records of unfinished queries", records.len() - kept.len());
    let mut buf = String::new();
    for r in kept {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Runs every task without a completed trace in `config.output_dir`.
pub fn run_queries(config: &ExperimentConfig, agent: &Agent, tasks: &[QueryTask]) -> Result<RunOutcome> {
    let dir = config.output_dir.as_path();
    let done: BTreeSet<String> = read_traces(dir)?
        .into_values()
        .filter(|t| t.status.is_complete())
        .map(|t| t.qid)
        .collect();
    let usage_path = dir.join(USAGE_FILE);
    prune_orphan_usage(&usage_path, &done)?;
    let ledger = Ledger::open(&usage_path)?;

    let mut outcome = RunOutcome::default();
    let mut pending: Vec<&QueryTask> = Vec::new();
    for t in tasks {
        if done.contains(&t.qid) {
            outcome.skipped.push(t.qid.clone());
        } else {
            pending.push(t);
        }
    }
    if let Some(seed) = config.seed {
        pending.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = config.concurrency.clamp(1, pending.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = pending.get(i) else { break };
                let r = run_one(dir, agent, task, &ledger);
                results.lock().unwrap().push((i, task.qid.clone(), r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    for (_, qid, r) in results {
        match r {
            Ok(true) => outcome.completed.push(qid),
            Ok(false) => outcome.failed.push(qid),
            Err(e) => {
                log::error!("{qid}: {e:#}");
                outcome.failed.push(qid);
            }
        }
    }
    if !pending.is_empty() && outcome.completed.is_empty() {
        bail!("all {} queries failed", pending.len());
    }
    Ok(outcome)
}

/// Returns whether the run completed.
fn run_one(dir: &Path, agent: &Agent, task: &QueryTask, ledger: &Ledger) -> Result<bool> {
    let buffer = Ledger::new();
    let trace = agent.run(task, &buffer);
    let jsonl = trace.to_jsonl();
    if !trace.status.is_complete() {
        log::warn!("{}: run failed ({})", task.qid, trace.flags.join(", "));
        write_atomic(&failed_path(dir, &task.qid), jsonl.as_bytes())?;
        return Ok(false);
    }
    // Usage first: on resume, records without a trace are pruned.
    ledger.extend(&buffer.records())?;
    write_atomic(&trace_path(dir, &task.qid), jsonl.as_bytes())?;
    log::info!("{}: {:?} after {} searches", task.qid, trace.status, trace.search_calls);
    Ok(true)
}

/// Full `run` command: validates the config, builds endpoints, runs all queries.
pub fn cmd_run(mut config: ExperimentConfig, api_key: Option<&str>) -> Result<RunOutcome> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    let tasks = config.load_tasks()?;
    let retriever = config.build_retriever(&corpus, api_key)?;
    let tok = Arc::clone(corpus.tokenizer());
    let llm = config
        .endpoints
        .agent
        .as_ref()
        .context("no agent endpoint: pass --agent-endpoint or set DEEPSEARCH_ENDPOINT")?
        .chat(api_key, Arc::clone(&tok))?;
    let reranker = match &config.endpoints.reranker {
        Some(spec) if config.agent.rerank.enabled() => Some(spec.chat(api_key, tok)?),
        _ => None,
    };
    prepare_run_dir(&config)?;
    let agent = Agent::new(config.agent.clone(), llm, retriever, reranker, corpus)?;
    run_queries(&config, &agent, &tasks)
}
