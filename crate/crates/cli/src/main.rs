//! Command-line front end for mixture SUR fitting.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod ingest;
mod report;

use commands::Status;
use config::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(name = "mixsur", version, about = "Seemingly unrelated regressions with Gaussian-mixture errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model for each K and report the BIC-best one
    Fit(CommonArgs),
    /// Search regressor subsets and K by BIC
    Select(CommonArgs),
    /// Parametric bootstrap of the regression coefficients
    Bootstrap(CommonArgs),
    /// Draw responses from a parameter file at the observed regressors
    Simulate(CommonArgs),
    /// Compare analytic derivatives with finite differences
    Gradcheck(CommonArgs),
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let (args, f): (&CommonArgs, fn(&RunConfig) -> anyhow::Result<Status>) = match &cli.command {
        Command::Fit(a) => (a, commands::cmd_fit),
        Command::Select(a) => (a, commands::cmd_select),
        Command::Bootstrap(a) => (a, commands::cmd_bootstrap),
        Command::Simulate(a) => (a, commands::cmd_simulate),
        Command::Gradcheck(a) => (a, commands::cmd_gradcheck),
    };
    let cfg = RunConfig::resolve(args)?;
    f(&cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            let fit_failed = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<mixsur::Error>(), Some(mixsur::Error::AllStartsFailed(_))));
            ExitCode::from(if fit_failed { 2 } else { 1 })
        }
    }
}
