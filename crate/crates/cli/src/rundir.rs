//! Run-directory layout and atomic file helpers.
//!
//! ```text
//! <run>/config.json
//! <run>/traces/<qid>.jsonl        completed runs (answered or unanswered)
//! <run>/failed/<qid>.jsonl        runs that hit an endpoint failure; retried on resume
//! <run>/usage.jsonl               search and rerank usage of completed runs
//! <run>/judge/verdicts.jsonl
//! <run>/judge/usage.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deepsearch_core::agent::RunTrace;

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const USAGE_FILE: &str = "usage.jsonl";
pub const TRACES_DIR: &str = "traces";
pub const FAILED_DIR: &str = "failed";
pub const JUDGE_DIR: &str = "judge";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";

/// Filesystem-safe name for a qid: ASCII alphanumerics, `-`, `_` and `.` pass
/// through, everything else is `%XX` encoded.
pub fn qid_file_stem(qid: &str) -> String {
    let mut out = String::with_capacity(qid.len());
    for b in qid.bytes() {
        match b {
            b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'-' | b'_' => out.push(b as char),
            b'.' if !out.is_empty() => out.push('.'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

pub fn trace_path(run: &Path, qid: &str) -> PathBuf {
    run.join(TRACES_DIR).join(format!("{}.jsonl", qid_file_stem(qid)))
}

pub fn failed_path(run: &Path, qid: &str) -> PathBuf {
    run.join(FAILED_DIR).join(format!("{}.jsonl", qid_file_stem(qid)))
}

/// Writes via a temporary sibling and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("path has no parent")?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().context("path has no file name")?.to_string_lossy()
    ));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_config(run: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&run.join(CONFIG_FILE))
}

/// Completed traces keyed by qid.
pub fn read_traces(run: &Path) -> Result<BTreeMap<String, RunTrace>> {
    let dir = run.join(TRACES_DIR);
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for p in paths {
        let raw = fs::read_to_string(&p)?;
        let trace = RunTrace::from_jsonl(&raw).with_context(|| format!("reading {}", p.display()))?;
        out.insert(trace.qid.clone(), trace);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qid_stems_are_safe() {
        assert_eq!(qid_file_stem("q-12_a"), "q-12_a");
        assert_eq!(qid_file_stem("a/b"), "a%2Fb");
        assert_eq!(qid_file_stem("..x"), "%2E.x");
        assert_ne!(qid_file_stem("a b"), qid_file_stem("a_b"));
    }
}
