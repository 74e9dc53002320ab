//! Experiment harness for the `qrd` binary: configuration, run manifests
//! and the six subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use cli::Cli;
pub use error::{CliError, CliResult};

/// Sizes the global thread pool from `QRD_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("QRD_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("QRD_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    commands::run(cli.command)
}
