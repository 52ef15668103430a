//! `proofloop`: solve problems, score graders, report costs, replay traces.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | verified solution, or a read-only command succeeded |
//! | 1 | runtime error |
//! | 2 | usage or configuration error |
//! | 10 | best-effort solution (not verified) |
//! | 11 | token budget exhausted |
//! | 12 | replay diverged from the recorded trace |

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<proofloop::Error> for CliError {
    fn from(e: proofloop::Error) -> Self {
        match e {
            proofloop::Error::Config(_) | proofloop::Error::Invalid(_) | proofloop::Error::Prompt(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "proofloop", version, about = "Memory-augmented solver/grader pipeline for proof-style problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write the solution, trace and cost ledger.
    Solve(SolveArgs),
    /// Score a grader against human grades (CSV or JSONL records).
    Metrics(MetricsArgs),
    /// Cost table from a ledger or trace, or a worst-case estimate.
    Cost(CostArgs),
    /// Re-run a scripted trace and report the first divergence.
    Replay(ReplayArgs),
    /// Continue a solve from one of its checkpoints.
    Resume(ResumeArgs),
}

#[derive(Args)]
pub struct PipelineFlags {
    /// Phase 1 iterations.
    #[arg(long)]
    pub l0: Option<u32>,
    /// Conjecture iterations (0 disables them).
    #[arg(long)]
    pub l: Option<u32>,
    /// Solver branches per round.
    #[arg(long)]
    pub k: Option<u32>,
    /// Score that settles a conjecture side.
    #[arg(long)]
    pub tau: Option<u8>,
    /// Threshold for the final enhancement round.
    #[arg(long)]
    pub tau_e: Option<u8>,
    /// Independent runs, judged against each other.
    #[arg(long)]
    pub parallel_runs: Option<u32>,
    /// Total tokens across all runs.
    #[arg(long)]
    pub token_budget: Option<u64>,
    /// Conjectures kept per extraction.
    #[arg(long)]
    pub extraction_budget: Option<u32>,
    /// Reserve each call's full output allowance before admitting it.
    #[arg(long)]
    pub strict_budget: bool,
    /// Fan out branches on threads (disables checkpoints).
    #[arg(long)]
    pub threads: bool,
}

#[derive(Args)]
pub struct SolveArgs {
    /// Problem file (TOML with `id`, `statement`, optional `additional_materials`).
    pub problem: PathBuf,
    /// Config file (backend, prices, pipeline settings).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use a scripted backend with this script instead of the configured one.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Output directory (default: the config's output_dir, else proofloop-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args)]
pub struct MetricsArgs {
    pub records: PathBuf,
    /// Also write metrics.txt, metrics.csv, confusion.csv and metrics.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    pub format: String,
}

#[derive(Args)]
pub struct CostArgs {
    /// A ledger.json or trace.jsonl file.
    pub input: Option<PathBuf>,
    /// Price table (TOML) used to re-price the entries.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long, default_value = "Pipeline")]
    pub label: String,
    #[arg(long)]
    pub csv: bool,
    /// TOKENS_PER_CALL CALLS_PER_ROUND ROUNDS PARALLEL_RUNS USD_PER_MILLION
    #[arg(long, num_args = 5, value_names = ["TOKENS", "CALLS", "ROUNDS", "RUNS", "USD_PER_M"])]
    pub estimate: Option<Vec<String>>,
}

#[derive(Args)]
pub struct ReplayArgs {
    pub trace: PathBuf,
    /// Script to replay against instead of the one recorded in the trace.
    #[arg(long)]
    pub script: Option<PathBuf>,
}

#[derive(Args)]
pub struct ResumeArgs {
    /// Output directory of the original solve.
    pub dir: PathBuf,
    /// Checkpoint id; omit to list the available ones.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => commands::solve(args),
        Command::Metrics(args) => commands::metrics(args),
        Command::Cost(args) => commands::cost(args),
        Command::Replay(args) => commands::replay(args),
        Command::Resume(args) => commands::resume(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
