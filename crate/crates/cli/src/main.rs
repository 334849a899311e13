//! `topocell`: design topographies, build synthetic datasets, train the
//! predictor and analyze its output from the shell.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

/// Argument and configuration problems; they exit with status 2. Every other
/// failure exits with status 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
}

/// One-line diagnostic `error[<kind>]: <message>` and the exit status.
fn diagnose(e: &anyhow::Error) -> (String, u8) {
    let (kind, code) = match e.downcast_ref::<CliError>() {
        Some(CliError::Usage(_)) => ("usage", 2),
        Some(CliError::Config(_)) => ("config", 2),
        None => ("failed", 1),
    };
    // Lower-level errors often repeat their source in their own message.
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    let message = message.replace(['\n', '\r'], " ");
    (format!("error[{kind}]: {message}"), code)
}

#[derive(Parser, Debug)]
#[command(name = "topocell", version, about = "Predict cell positioning on machined topographies")]
struct Cli {
    /// key = value configuration file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set oracle.theta_align_um=14`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed every random stream derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a topography spec to a grayscale PNG.
    Pattern(commands::PatternArgs),
    /// Build a synthetic training dataset.
    Oracle(commands::OracleArgs),
    /// Train the generator/discriminator pair on a dataset manifest.
    Train(commands::TrainArgs),
    /// Predict a fluorescence image for a topography, day and density.
    Predict(commands::PredictArgs),
    /// Compare a predicted image against an experimental one.
    Compare(commands::CompareArgs),
    /// Sweep line width and separation and locate the alignment threshold.
    Sweep(commands::SweepArgs),
    /// Run the built-in numerical checks.
    Selftest(commands::SelftestArgs),
}

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (line, code) = diagnose(&e);
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

fn run(argv: impl IntoIterator<Item = std::ffi::OsString>) -> anyhow::Result<()> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return Err(CliError::Usage(first.to_string()).into());
        }
    };
    let mut cfg = config::RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    match cli.command {
        Command::Pattern(a) => commands::pattern(cfg, a),
        Command::Oracle(a) => commands::oracle(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Predict(a) => commands::predict(cfg, a),
        Command::Compare(a) => commands::compare(cfg, a),
        Command::Sweep(a) => commands::sweep(cfg, a),
        Command::Selftest(a) => commands::selftest(cfg, a),
    }
}
