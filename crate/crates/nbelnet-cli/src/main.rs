//! `nbelnet`: elastic-net negative binomial regression and the bound
//! toolkit attached to it, as a command-line tool.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 fit did not
//! converge, 3 requested theory bound inapplicable (tau out of range in
//! every replicate).

// Validation guards are written `!(x > 0)` rather than `x <= 0` so that
// NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod cmds;
mod io;
mod jout;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 1,
        }
    }

    pub fn non_convergence(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 2,
        }
    }

    pub fn bound_inapplicable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            code: 3,
        }
    }
}

impl From<nbelnet::Error> for CliError {
    fn from(e: nbelnet::Error) -> Self {
        match e {
            nbelnet::Error::BoundInapplicable { .. } => CliError::bound_inapplicable(e.to_string()),
            other => CliError::input(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nbelnet",
    about = "Elastic-net negative binomial regression with oracle-bound, selection and de-biasing diagnostics",
    version
)]
struct Cli {
    /// Size of the worker thread pool (default: number of cores). Results
    /// are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the elastic-net NB estimator on a CSV file.
    Fit(cmds::FitArgs),
    /// Run a replicated simulation experiment.
    Simulate(cmds::SimulateArgs),
    /// Oracle-bound validity experiment (l1 error against both bound routes).
    OracleCheck(cmds::OracleCheckArgs),
    /// Grouping inequality report for coefficient pairs.
    Grouping(cmds::GroupingArgs),
    /// Replicated sign-consistency experiment.
    SignConsistency(cmds::SignConsistencyArgs),
    /// Replicated honest-selection experiment.
    Select(cmds::SelectArgs),
    /// De-biased estimate with confidence intervals on a CSV file.
    Debias(cmds::DebiasArgs),
    /// Cameron-Trivedi overdispersion test on a CSV file.
    DispTest(cmds::DispTestArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Fit(args) => cmds::run_fit(&args),
        Command::Simulate(args) => cmds::run_simulate(&args),
        Command::OracleCheck(args) => cmds::run_oracle_check(&args),
        Command::Grouping(args) => cmds::run_grouping(&args),
        Command::SignConsistency(args) => cmds::run_sign_consistency(&args),
        Command::Select(args) => cmds::run_select(&args),
        Command::Debias(args) => cmds::run_debias(&args),
        Command::DispTest(args) => cmds::run_disp_test(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
