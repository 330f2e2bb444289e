//! `moelo` binary: ties TOML configuration to data generation, scenario
//! execution, sweeps, checkpoint evaluation, and self-checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! `MOELO_LOG={error|info|debug}` controls stderr logging; results go only
//! to files under the output directory and to standard output.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, Overrides, Settings};

/// A failed command, split by exit class.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration; nothing was computed. Exit 2.
    Config(String),
    /// The work itself failed. Exit 1.
    Runtime(String),
}

impl Failure {
    fn config(msg: String) -> Self {
        Failure::Config(msg)
    }

    fn runtime(err: moelo_core::Error) -> Self {
        Failure::Runtime(err.to_string())
    }

    fn runtime_msg(msg: String) -> Self {
        Failure::Runtime(msg)
    }
}

#[derive(Parser)]
#[command(
    name = "moelo",
    version,
    about = "Continual-learning lab for Wi-Fi fingerprint localization with ETF-gated experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; all randomness derives from it.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Scenario track: dil, cil, cdil, or all.
    #[arg(long, value_name = "TRACK")]
    track: Option<String>,
    /// Synthetic world template: building1 or building2.
    #[arg(long, value_name = "NAME")]
    building: Option<String>,
    /// Output directory; every file the command writes lands inside it.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reference points per region for the partition.
    #[arg(long, value_name = "INT")]
    n_rp: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic fingerprint dataset as CSV.
    GenData(CommonArgs),
    /// Execute the configured track(s); write metrics.csv, summary.json, and a checkpoint.
    Run(CommonArgs),
    /// Run the region-granularity sweep on the paired track; write sweep.csv.
    Sweep(CommonArgs),
    /// Evaluate a checkpoint on a dataset CSV; print JSON metrics to stdout.
    Eval {
        /// Model or experiment checkpoint JSON.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset CSV to evaluate on.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Verify anchor geometry and gradient fidelity; exit non-zero on failure.
    Check {
        /// Seed for the generated anchors and the audited model.
        #[arg(long, value_name = "INT", default_value_t = 7)]
        seed: u64,
    },
}

fn resolve(args: CommonArgs) -> Result<Settings, Failure> {
    let file = match &args.config {
        Some(path) => config::load_file(path)?,
        None => FileConfig::default(),
    };
    config::resolve(
        file,
        Overrides {
            seed: args.seed,
            track: args.track,
            building: args.building,
            out: args.out,
            n_rp: args.n_rp,
        },
    )
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(args) => commands::gen_data(&resolve(args)?),
        Command::Run(args) => commands::run(&resolve(args)?),
        Command::Sweep(args) => commands::sweep(&resolve(args)?),
        Command::Eval { checkpoint, data } => commands::eval(&checkpoint, &data),
        Command::Check { seed } => commands::check(seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOELO_LOG", "error")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
