//! Command-line frontend: knockoff selection, simulation sweeps, conditional
//! randomization p-values, meta-analysis z-scores, and s-vector construction
//! from files of summary statistics.
//!
//! Exit codes: 0 success, 2 malformed input, 3 numeric failure.

use clap::{Parser, Subcommand};
use std::process::ExitCode;

mod cmds;
mod config;
mod io;

#[derive(Parser)]
#[command(
    name = "ghostknock",
    version,
    about = "FDR-controlled variable selection from summary statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a knockoff selection pipeline on summary statistics.
    Select(cmds::SelectArgs),
    /// Run a power/FDR simulation sweep from a TOML configuration.
    Simulate(cmds::SimulateArgs),
    /// Conditional randomization p-values with Benjamini-Hochberg rejections.
    Crt(cmds::CrtArgs),
    /// Combine multi-study z-scores into meta-analysis z-scores.
    Meta(cmds::MetaArgs),
    /// Solve for the knockoff s-vector of a covariance matrix.
    SSolve(cmds::SSolveArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Select(args) => cmds::cmd_select(args),
        Command::Simulate(args) => cmds::cmd_simulate(args),
        Command::Crt(args) => cmds::cmd_crt(args),
        Command::Meta(args) => cmds::cmd_meta(args),
        Command::SSolve(args) => cmds::cmd_s_solve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
