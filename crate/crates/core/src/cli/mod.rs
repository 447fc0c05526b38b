//! Command-line experiment runner.
//!
//! `bellman-lab <subcommand> --config <path> [--out <dir>]`. Exit status is
//! 0 when every enabled check passes, 1 when a check fails or a solver
//! errors, and 2 when the configuration is invalid.

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use run::{Check, Context, Outcome};

use crate::error::LabError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID_CONFIG: i32 = 2;
pub const THREADS_ENV: &str = "BELLMAN_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bellman-lab", version, about = "Utility maximization experiments in incomplete diffusion markets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the market and write an ensemble summary.
    Simulate(Args),
    /// Value curves from every applicable route.
    Value(Args),
    /// Backward solver run with diagnostics.
    Bsde(Args),
    /// Grid solve, convergence table and Feynman-Kac cross-check.
    Pde(Args),
    /// Optimality-principle tests, brute force and forward cross-check.
    Verify(Args),
    /// Everything above with a combined summary.
    All(Args),
}

#[derive(Debug, Clone, PartialEq, Eq, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &Args {
        match self {
            Command::Simulate(a)
            | Command::Value(a)
            | Command::Bsde(a)
            | Command::Pde(a)
            | Command::Verify(a)
            | Command::All(a) => a,
        }
    }
}

/// Caps the global rayon pool from `BELLMAN_LAB_THREADS` when set.
pub fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // a pool built earlier in the process wins; nothing to do then
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn exit_for(err: &LabError) -> i32 {
    match err {
        LabError::Config(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Runs one subcommand and reports on stdout/stderr; returns the exit status.
pub fn execute(command: Command) -> i32 {
    if let Err(msg) = configure_threads() {
        eprintln!("invalid environment: {msg}");
        return EXIT_INVALID_CONFIG;
    }
    let args = command.args();
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid config {}: {}", args.config.display(), strip_prefix(&e));
            return EXIT_INVALID_CONFIG;
        }
    };
    let ctx = match Context::new(config, args.out.clone()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid config {}: {}", args.config.display(), strip_prefix(&e));
            return exit_for(&e);
        }
    };
    let result = match command {
        Command::Simulate(_) => run::simulate(&ctx),
        Command::Value(_) => run::value(&ctx),
        Command::Bsde(_) => run::bsde(&ctx),
        Command::Pde(_) => run::pde(&ctx),
        Command::Verify(_) => run::verify(&ctx),
        Command::All(_) => run::all(&ctx),
    };
    match result {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if outcome.passed() {
                EXIT_OK
            } else {
                for c in outcome.failures() {
                    if let Some(p) = &c.report {
                        eprintln!("check {} failed; see {}", c.name, p.display());
                    }
                }
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn strip_prefix(e: &LabError) -> String {
    match e {
        LabError::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

/// Parses `argv` and runs; usage errors exit with status 2.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => execute(cli.command),
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            code
        }
    }
}
