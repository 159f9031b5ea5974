//! `stising`: estimation, verification and scanning from a reproducible configuration.
//!
//! Exit codes: 0 success, 1 a check failed (or the run could not complete),
//! 2 usage or configuration error, 3 the request exceeds what is implemented.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stising::Error;

use commands::Check;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "stising", version = output::VERSION, about = "Space-time Ising estimators, verifiers and sampler")]
struct Cli {
    /// TOML configuration file (flat keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gamma=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate an observable (magnetization, two-point, truncated, susceptibility, correlation).
    Estimate {
        observable: Option<String>,
    },
    /// Check an identity or inequality statistically.
    Verify {
        #[command(subcommand)]
        check: VerifyCommand,
    },
    /// Compare a Monte Carlo estimate with the exact oracles.
    OracleCompare {
        observable: Option<String>,
    },
    /// Binder-ratio scan for the critical ratio in one dimension.
    ScanCritical,
    /// Equal-time correlation decay with resumable chains.
    Decay,
}

#[derive(Subcommand, Clone, Copy)]
enum VerifyCommand {
    Switching,
    Gks,
    Ghs,
    Concavity,
    SimonLieb,
    Pdi,
    Derivatives,
    Partition,
    Backbone,
}

impl From<VerifyCommand> for Check {
    fn from(v: VerifyCommand) -> Self {
        match v {
            VerifyCommand::Switching => Check::Switching,
            VerifyCommand::Gks => Check::Gks,
            VerifyCommand::Ghs => Check::Ghs,
            VerifyCommand::Concavity => Check::Concavity,
            VerifyCommand::SimonLieb => Check::SimonLieb,
            VerifyCommand::Pdi => Check::Pdi,
            VerifyCommand::Derivatives => Check::Derivatives,
            VerifyCommand::Partition => Check::Partition,
            VerifyCommand::Backbone => Check::Backbone,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Domain(_) | Error::Consistency(_) => 2,
        Error::Capability(_) => 3,
        _ => 1,
    }
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    let observable = match &cli.command {
        Command::Estimate { observable } | Command::OracleCompare { observable } => observable.clone(),
        _ => None,
    };
    if let Some(obs) = observable {
        o.push(format!("observable={obs:?}"));
    }
    if let Some(s) = cli.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        o.push(format!("workers={w}"));
    }
    if let Some(out) = &cli.out {
        o.push(format!("out={:?}", out.display().to_string()));
    }
    o
}

fn run(cli: &Cli) -> stising::Result<Option<bool>> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli))?;
    let outcome = match &cli.command {
        Command::Estimate { .. } => commands::estimate(&cfg)?,
        Command::Verify { check } => commands::verify(&cfg, (*check).into())?,
        Command::OracleCompare { .. } => commands::oracle_compare(&cfg)?,
        Command::ScanCritical => commands::scan_critical(&cfg)?,
        Command::Decay => commands::decay(&cfg)?,
    };
    let files = output::write(&cfg, &outcome)?;
    output::print_summary(&outcome, &files);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(false)) => ExitCode::from(1),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
