use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Online matrix completion for daily spatio-temporal sensor data.
#[derive(Parser, Debug)]
#[command(name = "vbfsi", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random stream (mask, init, noise, outliers)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for output files (created if missing)
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Progress messages on stderr
    #[arg(long, short, global = true)]
    pub verbose: bool,

    /// Set a config key, e.g. `--set max_iters=300`. Repeatable; applied
    /// after the config file and before the dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic stream with ground truth
    Synth(SynthArgs),
    /// Complete one day or run the online pipeline over a stream
    Impute(RunArgs),
    /// As `impute` with the sparse outlier model; needs `--robust`
    Robust(RobustArgs),
    /// MRE and RMSE over a grid of prior weights and sampling fractions
    Sweep(SweepArgs),
    /// Score imputed matrices against ground truth
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Sampling fraction of each day
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Per-day perturbation of the shared factors
    #[arg(long)]
    pub drift_std: Option<f64>,
    /// Reuse one temporal profile on every day
    #[arg(long)]
    pub periodic: bool,
    /// Fraction of observed cells corrupted by uniform outliers
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Outliers are drawn from [-m, m]
    #[arg(long)]
    pub outlier_magnitude: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `day,row,col,value` lines
    Long,
    /// Blank-line-separated dense blocks
    Dense,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Observations
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long, value_enum, default_value = "long")]
    pub format: InputFormat,

    /// Dense ground truth, one block per day, for MRE and RMSE
    #[arg(long)]
    pub truth: Option<PathBuf>,

    /// Fixed prior weight (overrides the schedule)
    #[arg(long)]
    pub eta: Option<f64>,

    /// traffic, air or constant
    #[arg(long)]
    pub schedule: Option<String>,

    /// Leading days used only to build the first prior
    #[arg(long)]
    pub warmup_days: Option<usize>,

    /// Use the sparse outlier model
    #[arg(long)]
    pub robust: bool,
}

#[derive(Args, Debug)]
pub struct RobustArgs {
    #[command(flatten)]
    pub run: RunArgs,

    /// Known corruption (`day,row,col,e`) for support F1
    #[arg(long)]
    pub outlier_truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Prior weights (default 1,0.9,0.75,0.5,0.25,0.1)
    #[arg(long, value_delimiter = ',')]
    pub etas: Option<Vec<f64>>,

    /// Sampling fractions (default 0.05,0.1,0.15,0.25,0.5,0.75)
    #[arg(long, value_delimiter = ',')]
    pub ps: Option<Vec<f64>>,

    /// Dense complete matrices to sample; synthetic data when absent
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dense ground truth, one block per day
    #[arg(long)]
    pub truth: PathBuf,

    /// Dense estimates; repeatable, blocks are taken in order
    #[arg(long, required = true)]
    pub estimate: Vec<PathBuf>,

    /// Day of the first estimate block
    #[arg(long, default_value_t = 0)]
    pub first_day: usize,

    /// Observations (long format); scores only the unobserved cells
    #[arg(long)]
    pub input: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
