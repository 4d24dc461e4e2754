use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stratkit::cli::{cmd_design, cmd_predict, cmd_report, cmd_simulate, CliError};
use stratkit::config::{LoadedConfig, Overrides};

#[derive(Parser)]
#[command(name = "stratkit", version, about = "Prognostic-score stratified experiment design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selects a backend from the configured `backends`.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Predict both potential outcomes per unit and write scores.csv.
    Predict(Common),
    /// Form strata from scores and covariates, then randomize.
    Design(Common),
    /// Compare designs by Monte Carlo simulation.
    Simulate(Common),
    /// Rebuild the report from stored replications.
    Report(Common),
}

type Handler = fn(&LoadedConfig) -> Result<serde_json::Value, CliError>;

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let (common, f): (&Common, Handler) = match &cli.command {
        Command::Predict(c) => (c, cmd_predict),
        Command::Design(c) => (c, cmd_design),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Report(c) => (c, cmd_report),
    };
    let overrides = Overrides { seed: common.seed, output_dir: common.out.clone(), backend: common.backend.clone() };
    let cfg = LoadedConfig::load(&common.config, &overrides)?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stratkit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
