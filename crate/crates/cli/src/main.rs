use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causex::Error;

mod commands;

/// Causal exploration experiments: synthetic environments, online structure
/// discovery, exploration runs and the linear convergence check.
///
/// Exit status: 0 success, 2 configuration or argument error, 3 divergence or
/// numerical failure, 4 I/O or malformed input file.
#[derive(Parser, Debug)]
#[command(name = "causex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an environment and write it as JSON.
    GenEnv {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; defaults to `<output dir>/env-seed<seed>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the exploration loop and write a run directory.
    Explore {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `<output dir>/<label>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the structure from a fixed buffer of transitions.
    Discover(DiscoverArgs),
    /// Check the convergence bounds of masked linear gradient descent.
    VerifyTheorem(TheoremArgs),
    /// Aggregate traces across seeds and compare sample efficiency.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment config; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set explorer.eta=0.2`. Repeatable;
    /// applied after the file, before the dedicated flags below.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Number of state variables.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of action variables.
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub edge_keep_prob: Option<f64>,
    #[arg(long, value_parser = ["linear", "nonlinear"])]
    pub transition: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Environment JSON from `gen-env`; built from the config when absent.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// JSON array of transitions; a uniformly random rollout when absent.
    #[arg(long)]
    pub buffer: Option<PathBuf>,
    /// Length of the random rollout.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Minibatch updates of the world model before coreset selection.
    #[arg(long, default_value_t = 1000)]
    pub train_steps: usize,
    /// Output directory; defaults to `<output dir>/discover-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TheoremArgs {
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = causex::theory::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = causex::theory::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value = "masked-trajectory", value_parser = ["masked-trajectory", "masked_trajectory", "projected"])]
    pub mode: String,
    /// Step size; `1/M` when absent. Single instances only.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Run this many random instances (shapes with n + c <= 20, densities
    /// 0.2/0.5/0.8) instead of one; `--n`, `--c` and `--density` are ignored.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `<output dir>/theorem-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory searched recursively for `trace.csv` files.
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long, default_value = "holdout_loss")]
    pub metric: String,
    /// Compare first crossings of this smoothed level between labels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = causex::metrics::SMOOTHING_WINDOW)]
    pub window: usize,
    /// Output JSON; defaults to `<input dir>/metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::DimensionMismatch(_) => 2,
        Error::Divergence(_) | Error::Numerical(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenEnv { config, out } => commands::gen_env(&config, out),
        Command::Explore { config, out } => commands::explore(&config, out),
        Command::Discover(args) => commands::discover(&args),
        Command::VerifyTheorem(args) => commands::verify_theorem(&args),
        Command::Metrics(args) => commands::metrics(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
