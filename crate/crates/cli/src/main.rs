//! `deliberank` command-line interface.
//!
//! Exit codes: 0 success, 1 run failure (too many failed queries), 2 config
//! or I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use commands::RunFailed;

#[derive(Parser, Debug)]
#[command(name = "deliberank", version, about = "Training-free composed image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate caption files and write a normalized proxy store.
    IngestProxies(IngestArgs),
    /// Retrieve, deliberate and score every query; writes a JSON report.
    Run(RunArgs),
    /// Summarize one or more reports; several reports are also averaged.
    Evaluate(EvaluateArgs),
    /// One full run per candidate pool size; prints CSV.
    SweepK(SweepArgs),
    /// Distill an experience library from labeled queries.
    Distill(DistillArgs),
    /// Generate the synthetic benchmark and a matching engine config.
    GenSynthetic(GenArgs),
}

#[derive(Args, Debug)]
#[group(id = "tier", required = true, multiple = false)]
struct TierArgs {
    /// Deterministic offline providers.
    #[arg(long)]
    mock: bool,
    /// Ground-truth-aware judge and router (harness runs only).
    #[arg(long)]
    oracle: bool,
    /// HTTP chat-completion providers from the config.
    #[arg(long)]
    live: bool,
}

#[derive(Args, Debug)]
struct EngineArgs {
    /// Engine configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    tier: TierArgs,
    /// Per-page error rate of the oracle judge (default 0).
    #[arg(long)]
    oracle_error: Option<f64>,
    /// Overrides `seed` (and the distillation seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Process at most this many queries.
    #[arg(long)]
    limit: Option<usize>,
    /// Overrides `fusion.mode`.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides `fusion.k`.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides `fusion.tau`.
    #[arg(long)]
    tau: Option<f64>,
    /// Overrides `deliberation.stages`.
    #[arg(long)]
    stages: Option<usize>,
    /// Overrides `deliberation.strategy_override`.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Overrides `run.query_concurrency`.
    #[arg(long)]
    query_concurrency: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Ipr,
    Static,
    Avg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Sequential,
    Parallel,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Caption files: JSONL (`{"image", "text"}`) or TSV (`id<TAB>text`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output proxy store (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Gallery manifest; every listed image must receive a proxy.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Truncate proxies to this many characters.
    #[arg(long, default_value_t = deliberank::domain::DEFAULT_PROXY_MAX_CHARS)]
    max_chars: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Report destination.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Reports written by `run`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the summary as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Summarize the pre-deliberation ranking instead of the final one.
    #[arg(long)]
    fused: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Candidate pool sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 25, 50])]
    ks: Vec<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Overrides `experience.distill.rounds`.
    #[arg(long)]
    rounds: Option<usize>,
    /// Overrides `experience.distill.rollouts`.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Library destination; defaults to `experience.path`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_gallery: usize,
    #[arg(long, default_value_t = 50)]
    n_queries: usize,
    #[arg(long, default_value_t = 4)]
    n_attrs: usize,
    /// Gaussian noise on image vectors.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Holistic, explicit and visual shares.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 0.0, 0.0])]
    intent_mix: Vec<f64>,
    /// Probability that a caption misstates one attribute.
    #[arg(long, default_value_t = 0.0)]
    caption_error: f64,
    #[arg(long, default_value_t = 0.3)]
    near_duplicate_share: f64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::IngestProxies(a) => commands::ingest_proxies(a),
            Command::Run(a) => commands::run(a).await,
            Command::Evaluate(a) => commands::evaluate(a),
            Command::SweepK(a) => commands::sweep_k(a).await,
            Command::Distill(a) => commands::distill(a).await,
            Command::GenSynthetic(a) => commands::gen_synthetic(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<RunFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Error chain on one line; causes already quoted by their parent are skipped.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}
