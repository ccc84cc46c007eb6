mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use feedcap::optim::OptimizerOptions;
use feedcap::Error;

/// Finite-block feedback capacity of Gaussian channels with state-space noise.
#[derive(Debug, Parser)]
#[command(name = "feedcap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the noise filter and report the noise entropy.
    Filter(FilterArgs),
    /// Optimize the sequential strategy under a power budget.
    Capacity(CapacityArgs),
    /// Optimize with both engines and report their difference.
    OracleCompare(CapacityArgs),
    /// Iterate both Riccati recursions to their fixed point.
    SteadyState(SteadyStateArgs),
    /// Optimize, then check the closed loop by Monte Carlo.
    Simulate(SimulateArgs),
    /// Report C_n / n over increasing horizons.
    Asymptotic(AsymptoticArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Horizon override; time-invariant models can be extended, others truncated.
    #[arg(long)]
    n: Option<usize>,
    /// Report rates in bits instead of nats.
    #[arg(long)]
    bits: bool,
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// Number of random starts.
    #[arg(long, default_value_t = 16)]
    restarts: usize,
    /// Iteration cap per start.
    #[arg(long, default_value_t = 400)]
    max_iter: usize,
    /// Gradient-norm stopping tolerance.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Seed for the starts and the Monte Carlo draws.
    #[arg(long, env = "FEEDCAP_SEED", default_value_t = 0x5eed)]
    seed: u64,
    /// Always run the numerical optimizer, even where a closed form exists.
    #[arg(long)]
    no_fast_paths: bool,
}

impl OptimArgs {
    fn options(&self) -> OptimizerOptions {
        OptimizerOptions {
            restarts: self.restarts,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            fast_paths: !self.no_fast_paths,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct CapacityArgs {
    #[command(flatten)]
    common: Common,
    /// Average power budget.
    #[arg(long, allow_hyphen_values = true)]
    kappa: f64,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct SteadyStateArgs {
    #[command(flatten)]
    common: Common,
    /// Constant feedback gain, comma separated (defaults to zero).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lambda: Option<Vec<f64>>,
    /// Constant dither variance.
    #[arg(long, default_value_t = 0.0)]
    dither: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_hyphen_values = true)]
    kappa: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Also write every sample path to trace.csv (small runs only).
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct AsymptoticArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_hyphen_values = true)]
    kappa: f64,
    /// Strictly increasing horizons, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    horizons: Vec<usize>,
    #[command(flatten)]
    optim: OptimArgs,
}

/// 1 for bad input or configuration, 2 for numerical failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) | Error::Singular(_) | Error::NotPsd { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Filter(a) => commands::filter(a),
        Command::Capacity(a) => commands::capacity(a),
        Command::OracleCompare(a) => commands::oracle_compare(a),
        Command::SteadyState(a) => commands::steady_state(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Asymptotic(a) => commands::asymptotic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
