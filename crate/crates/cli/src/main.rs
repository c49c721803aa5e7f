use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deepsearch_core::corpus::tokenizer_from_id;
use deepsearch_core::eval::Relevance;
use deepsearch_core::ledger::Ledger;
use deepsearch_core::llm::ReasoningEffort;
use deepsearch_cli::commands::{cmd_embed_load_check, cmd_ingest, cmd_retrieve};
use deepsearch_cli::config::{EmbeddingPaths, ExperimentConfig, RetrieverKind};
use deepsearch_cli::endpoints::EndpointSpec;
use deepsearch_cli::fixtures::{deep_search_points, no_rerank_baseline};
use deepsearch_cli::judge::cmd_judge;
use deepsearch_cli::report::{build_report, delta_rows, deltas_csv, etc_csv, etc_rows, summarize_run_dir, write_report, DEFAULT_ETC_UNIT};
use deepsearch_cli::rerank_eval::{rerank_eval, write_rerank_csv};
use deepsearch_cli::rundir::{read_config, write_atomic};
use deepsearch_cli::run::cmd_run;

#[derive(Parser)]
#[command(name = "deepsearch", version, about = "Deep-research agent harness with token-cost accounting")]
struct Cli {
    /// Bearer token for HTTP endpoints. Never written to disk.
    #[arg(long, env = "DEEPSEARCH_API_KEY", global = true, hide_env_values = true)]
    api_key: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a corpus and print token statistics.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "whitespace")]
        tokenizer: String,
    },
    /// Load an embedding index and check it against the corpus.
    EmbedLoadCheck {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "whitespace")]
        tokenizer: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
    },
    /// First-stage retrieval for every query, as JSONL.
    Retrieve {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reranking effectiveness over full questions at several depths.
    RerankEval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,50")]
        depths: Vec<usize>,
        /// CSV output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where reranker usage records go.
        #[arg(long)]
        usage: Option<PathBuf>,
    },
    /// Run the search agent over every query, resuming a partial run.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Grade the completed traces of a run directory.
    Judge {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        judge_endpoint: Option<EndpointSpec>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        judge_model: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Metrics, ETC grids and deltas over one or more run directories.
    Report {
        #[arg(long = "runs", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Label of the baseline run.
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// ETC grid and deltas for the checked-in published token tables.
    FixtureReport {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RelevanceArg {
    Evidence,
    Gold,
}

impl From<RelevanceArg> for Relevance {
    fn from(r: RelevanceArg) -> Self {
        match r {
            RelevanceArg::Evidence => Relevance::Evidence,
            RelevanceArg::Gold => Relevance::Gold,
        }
    }
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    betas: Vec<f64>,
    /// ETC deltas are divided by this many tokens.
    #[arg(long, default_value_t = DEFAULT_ETC_UNIT)]
    unit: f64,
    #[arg(long, value_enum, default_value = "evidence")]
    relevance: RelevanceArg,
}

/// Experiment inputs. `--config` loads a JSON file; any flag given overrides it.
#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_enum)]
    retriever: Option<RetrieverKind>,
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long, requires = "embeddings_vectors")]
    embeddings_manifest: Option<PathBuf>,
    #[arg(long, requires = "embeddings_manifest")]
    embeddings_vectors: Option<PathBuf>,
    #[arg(long, env = "DEEPSEARCH_ENDPOINT")]
    agent_endpoint: Option<EndpointSpec>,
    #[arg(long)]
    reranker_endpoint: Option<EndpointSpec>,
    #[arg(long)]
    judge_endpoint: Option<EndpointSpec>,
    #[arg(long)]
    embedder_endpoint: Option<EndpointSpec>,
    #[arg(long)]
    embedder_model: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    effort: Option<ReasoningEffort>,
    #[arg(long)]
    max_output_tokens: Option<u32>,
    #[arg(long)]
    max_context_tokens: Option<usize>,
    #[arg(long)]
    max_search_calls: Option<usize>,
    #[arg(long)]
    rerank_depth: Option<usize>,
    #[arg(long)]
    rerank_effort: Option<ReasoningEffort>,
    #[arg(long)]
    reranker_model: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let (Some(corpus), Some(queries)) = (&self.corpus, &self.queries) else {
                    bail!("pass --config or both --corpus and --queries");
                };
                ExperimentConfig::new(corpus.clone(), queries.clone(), self.output_dir.clone().unwrap_or_else(|| "runs/default".into()))
            }
        };
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.corpus => c.corpus);
        set!(self.queries => c.queries);
        set!(self.output_dir => c.output_dir);
        set!(self.label => c.label);
        set!(self.retriever => c.retriever);
        set!(self.tokenizer => c.tokenizer);
        if let (Some(manifest), Some(vectors)) = (self.embeddings_manifest, self.embeddings_vectors) {
            c.embeddings = Some(EmbeddingPaths { manifest, vectors });
        }
        if self.agent_endpoint.is_some() {
            c.endpoints.agent = self.agent_endpoint;
        }
        if self.reranker_endpoint.is_some() {
            c.endpoints.reranker = self.reranker_endpoint;
        }
        if self.judge_endpoint.is_some() {
            c.endpoints.judge = self.judge_endpoint;
        }
        if self.embedder_endpoint.is_some() {
            c.endpoints.embedder = self.embedder_endpoint;
        }
        if self.embedder_model.is_some() {
            c.endpoints.embedder_model = self.embedder_model;
        }
        set!(self.model => c.agent.model);
        set!(self.effort => c.agent.reasoning_effort);
        if self.max_output_tokens.is_some() {
            c.agent.max_output_tokens = self.max_output_tokens;
        }
        set!(self.max_context_tokens => c.agent.max_context_tokens);
        set!(self.max_search_calls => c.agent.max_search_calls);
        set!(self.rerank_depth => c.agent.rerank.depth);
        set!(self.rerank_effort => c.agent.rerank.reasoning_effort);
        set!(self.reranker_model => c.agent.rerank.model);
        set!(self.concurrency => c.concurrency);
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        Ok(c)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let key = cli.api_key.as_deref();
    match cli.command {
        Command::Ingest { corpus, tokenizer } => print_json(&cmd_ingest(&corpus, &tokenizer)?),
        Command::EmbedLoadCheck { corpus, tokenizer, manifest, vectors } => print_json(&cmd_embed_load_check(&corpus, &tokenizer, &manifest, &vectors)?),
        Command::Retrieve { exp, k, out } => {
            let mut w = output(out.as_deref())?;
            let n = cmd_retrieve(exp.into_config()?, key, k, &mut w)?;
            w.flush()?;
            log::info!("wrote {n} ranked entries");
            Ok(())
        }
        Command::RerankEval { exp, depths, out, usage } => {
            let mut config = exp.into_config()?;
            config.agent.rerank.depth = 0;
            config.validate()?;
            let corpus = config.load_corpus()?;
            let tasks = config.load_tasks()?;
            let retriever = config.build_retriever(&corpus, key)?;
            let reranker = match &config.endpoints.reranker {
                Some(spec) => Some(spec.chat(key, Arc::clone(corpus.tokenizer()))?),
                None => None,
            };
            let ledger = match &usage {
                Some(p) => Ledger::open(p)?,
                None => Ledger::new(),
            };
            let rows = rerank_eval(&tasks, retriever.as_ref(), &corpus, reranker, &config.agent.rerank, &depths, &ledger)?;
            let mut w = output(out.as_deref())?;
            write_rerank_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Run { exp } => {
            let outcome = cmd_run(exp.into_config()?, key)?;
            log::info!(
                "completed {}, skipped {}, failed {}",
                outcome.completed.len(),
                outcome.skipped.len(),
                outcome.failed.len()
            );
            if !outcome.failed.is_empty() {
                log::warn!("failed queries: {}", outcome.failed.join(", "));
            }
            Ok(())
        }
        Command::Judge { run, judge_endpoint, repetitions, judge_model, concurrency } => {
            let exp = read_config(&run)?;
            let mut jc = exp.judge.clone();
            if let Some(r) = repetitions {
                jc.repetitions = r;
            }
            if let Some(m) = judge_model {
                jc.model = m;
            }
            let spec = judge_endpoint
                .or(exp.endpoints.judge.clone())
                .context("no judge endpoint: pass --judge-endpoint")?;
            let endpoint = spec.chat(key, tokenizer_from_id(&exp.tokenizer)?)?;
            let outcome = cmd_judge(&run, endpoint.as_ref(), &jc, concurrency.unwrap_or(exp.concurrency))?;
            log::info!("judged {}, skipped {}", outcome.judged.len(), outcome.skipped.len());
            Ok(())
        }
        Command::Report { runs, baseline, out, grid } => {
            let summaries = runs
                .iter()
                .map(|d| summarize_run_dir(d, grid.relevance.into()))
                .collect::<Result<Vec<_>>>()?;
            let report = build_report(summaries, &baseline, &grid.alphas, &grid.betas, grid.unit)?;
            write_report(&report, &out)?;
            log::info!("wrote report for {} runs to {}", report.runs.len(), out.display());
            Ok(())
        }
        Command::FixtureReport { out, grid } => {
            let points = deep_search_points()?;
            std::fs::create_dir_all(&out)?;
            write_atomic(&out.join("etc.csv"), &etc_csv(&etc_rows(&points, &grid.alphas, &grid.betas)?)?)?;
            let deltas = delta_rows(&points, |p| no_rerank_baseline(&points, p), &grid.alphas, &grid.betas, grid.unit)?;
            write_atomic(&out.join("deltas.csv"), &deltas_csv(&deltas)?)?;
            Ok(())
        }
    }
}
