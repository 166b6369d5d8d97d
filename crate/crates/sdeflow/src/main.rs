use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser};
use sdeflow::{CliError, Format, Manifest, Subcommand};

/// Batch experiments for SDEs with singular drifts and the stochastic
/// Lagrangian Navier-Stokes fixed point.
#[derive(Parser, Debug)]
#[command(name = "sdeflow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config with an `experiments` list.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Seed for experiments that do not set their own.
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Format of the results table.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let c = &cli.common;
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| CliError::config("--config", format!("{}: {e}", c.config.display())))?;
    let base = c.config.parent().unwrap_or(Path::new("")).to_path_buf();
    if c.workers == Some(0) {
        return Err(CliError::config("--workers", "need at least one worker"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::config("--workers", e.to_string()))?;
    let outcome = pool.install(|| sdeflow::run(cli.command, &text, &base, c.seed))?;
    let manifest = Manifest::new(
        cli.command,
        c.seed,
        Some(&c.config),
        &text,
        c.format,
        c.workers,
    );
    sdeflow::write_outputs(&outcome, &c.out, c.format, manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sdeflow {}: {e}", cli.command.name());
            eprintln!("{}", e.payload());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
