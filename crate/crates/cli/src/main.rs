//! `hicra`: command-line driver for strategic-gram mining, planning-token
//! labeling, training-dynamics metrics, credit assignment, the toy
//! simulator and the error-type judge.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "hicra", version, about = "Planning-token analysis and hierarchy-aware credit assignment")]
pub struct Cli {
    /// TOML config file with one optional table per command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for randomized steps (simulation, gram dropping).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reject malformed trace lines instead of skipping them.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mine strategic grams from the correct solutions of a trace corpus.
    Mine(MineArgs),
    /// Label planning tokens and write annotated traces.
    Classify(ClassifyArgs),
    /// Compute per-step metric tables.
    Metrics(MetricsArgs),
    /// Dump per-token GRPO or HICRA advantages.
    Advantage(AdvantageArgs),
    /// Train the toy planning/execution simulator.
    Simulate(SimulateArgs),
    /// Classify failed solutions with an LLM judge.
    Judge(JudgeArgs),
    /// Combine emitted artifacts into tables, plots and a text summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Skip grams found in fewer solutions.
    #[arg(long)]
    pub min_df: Option<u64>,
    /// Precomputed embeddings (JSON object: surface -> vector).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Embeddings endpoint; token from HICRA_EMBED_TOKEN.
    #[arg(long)]
    pub embed_url: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// SG set file; the built-in lexicon when omitted.
    #[arg(long)]
    pub sgset: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub sgset: Option<PathBuf>,
    /// Semantic-entropy key: gram or cluster.
    #[arg(long)]
    pub key: Option<String>,
    #[arg(long)]
    pub follow_words: Option<usize>,
    /// Comma-separated k values for pass@k.
    #[arg(long, value_delimiter = ',')]
    pub pass_k: Option<Vec<usize>>,
    #[arg(long)]
    pub overlap_quantile: Option<f64>,
    /// Also emit moving averages of this width.
    #[arg(long)]
    pub smooth: Option<usize>,
    /// Also emit semantic entropy with this fraction of grams dropped.
    #[arg(long)]
    pub drop_rho: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AdvantageArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub sgset: Option<PathBuf>,
    /// grpo or hicra.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub std_normalize: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// grpo, hicra or entropy_reg.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub exec_bias: Option<f64>,
    #[arg(long)]
    pub entropy_coefficient: Option<f64>,
}

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// JSONL of {step, id?, problem, reference, student}.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Verdict cache; defaults to judge_cache.json in the output directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directories written by earlier commands.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad parameters or inputs: exit 1.
    Validation(String),
    /// I/O or service failure: exit 2.
    Runtime(String),
}

impl From<hicra_core::Error> for Failure {
    fn from(e: hicra_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Mine(a) => commands::mine(cli, a, &file.mine),
        Command::Classify(a) => commands::classify(cli, a, &file.classify),
        Command::Metrics(a) => commands::metrics(cli, a, &file.metrics),
        Command::Advantage(a) => commands::advantage(cli, a, &file.advantage),
        Command::Simulate(a) => commands::simulate(cli, a, file.simulate),
        Command::Judge(a) => commands::judge(cli, a, &file.judge),
        Command::Report(a) => report::run(cli, a, &file.report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors are validation errors; --help and --version succeed.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
