use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use switchbound::scenario::{run_scenario, validate_only, Overrides, ScenarioError};

/// Scenario runner for regime-switching simulation and bound verification.
#[derive(Parser)]
#[command(name = "switchbound", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config end to end and write CSVs plus a report.
    Run {
        /// path to the scenario config (TOML)
        config: PathBuf,
        /// master seed override (also: SWITCHBOUND_SEED env var)
        #[arg(long)]
        seed: Option<u64>,
        /// replica count override
        #[arg(long)]
        replicas: Option<usize>,
        /// output directory override
        #[arg(long)]
        out: Option<PathBuf>,
        /// worker thread count (0 = all cores)
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Parse a config and validate its inputs without running.
    Validate {
        /// path to the scenario config (TOML)
        config: PathBuf,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var("SWITCHBOUND_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            replicas,
            out,
            workers,
        } => {
            let overrides = Overrides {
                seed: seed.or_else(env_seed),
                replicas,
                out_dir: out,
                workers,
            };
            match run_scenario(&config, &overrides) {
                Ok(outcome) => {
                    print!("{}", outcome.report);
                    if outcome.passed {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("one or more checks failed");
                        ExitCode::from(1)
                    }
                }
                Err(e @ (ScenarioError::Schema(_) | ScenarioError::Validation(_))) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Validate { config } => match validate_only(&config) {
            Ok(msg) => {
                println!("{msg}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
    }
}
