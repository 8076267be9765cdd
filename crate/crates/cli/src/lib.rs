//! The `facl` command line: argument parsing, run directories and file
//! formats around `facl-core`.

mod commands;
mod error;
mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "FACL_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "facl",
    version,
    about = "Frequency-aware adaptive contrastive learning for sequential recommendation"
)]
pub struct Cli {
    /// Root under which per-run directories are created.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "facl-runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

/// Inputs shared by every command that reads a dataset.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Interaction file, one `user<TAB>item item ...` line per user.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory; defaults to `<out-root>/<config hash>-s<seed>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, truncate and split a dataset and write the derived files.
    Prepare(RunArgs),
    /// Print training-split statistics as JSON.
    Stats {
        #[command(flatten)]
        run: RunArgs,
        /// Write a histogram of sequence weights to this CSV.
        #[arg(long)]
        lambda_hist: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        bucket_width: f64,
    },
    /// Generate a synthetic long-tail dataset.
    GenSynth(SynthArgs),
    /// Measure per-bin perturbation rates of the item operators.
    AuditAug {
        #[command(flatten)]
        run: RunArgs,
        /// `drop`, `substitute`, `insert` or `all`.
        #[arg(long, default_value = "drop")]
        op: String,
        /// Defaults to the `audit_trials` config key.
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Train a model, keeping checkpoints and a JSON-lines log.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Train every cell of a parameter grid and collect the results.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// `key=v1,v2,...`. Repeatable; cells are the cartesian product.
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        /// Results CSV; defaults to `sweep.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a run directory and write plot-ready CSVs.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Checkpoint utilities.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Debug, Subcommand)]
pub enum CheckpointCommand {
    /// Print tensor shapes and norms.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = 5)]
    pub favored_size: usize,
    #[arg(long, default_value_t = 0.3)]
    pub favored_prob: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; its best checkpoint is evaluated.
    #[arg(
        long,
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the dataset recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
    pub split: String,
    /// Defaults to the run directory or the checkpoint's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    commands::dispatch(cli)
}
