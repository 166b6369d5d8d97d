//! Std companion to `sdeflow-core`: JSON experiment configs, result and grid
//! file formats, run manifests, and the `sdeflow` command-line driver.
//!
//! A run parses a config for one subcommand, computes every experiment in
//! order, and only then writes `results.{csv,json}`, the per-experiment
//! artifacts and `manifest.json` into the output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

pub use commands::{Artifact, Outcome};
pub use error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Simulate,
    Stability,
    Gradient,
    Jacobian,
    Zvonkin,
    NseSolve,
    NseKernelTest,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Stability => "stability",
            Subcommand::Gradient => "gradient",
            Subcommand::Jacobian => "jacobian",
            Subcommand::Zvonkin => "zvonkin",
            Subcommand::NseSolve => "nse-solve",
            Subcommand::NseKernelTest => "nse-kernel-test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Parses `config_text` for `cmd` and runs it. Relative paths inside the
/// config resolve against `base_dir`.
pub fn run(cmd: Subcommand, config_text: &str, base_dir: &Path, seed: u64) -> Result<Outcome> {
    use commands as c;
    let ctx = c::Ctx {
        seed,
        base: base_dir,
    };
    match cmd {
        Subcommand::Simulate => c::simulate(&config::parse(config_text)?, &ctx),
        Subcommand::Stability => c::stability(&config::parse(config_text)?, &ctx),
        Subcommand::Gradient => c::gradient(&config::parse(config_text)?, &ctx),
        Subcommand::Jacobian => c::jacobian(&config::parse(config_text)?, &ctx),
        Subcommand::Zvonkin => c::zvonkin(&config::parse(config_text)?, &ctx),
        Subcommand::NseSolve => c::nse_solve(&config::parse(config_text)?, &ctx),
        Subcommand::NseKernelTest => c::nse_kernel_test(&config::parse(config_text)?, &ctx),
    }
}

/// Replay information; the only place a timestamp is written.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: Subcommand,
    pub seed: u64,
    pub git_revision: Option<String>,
    pub config_path: Option<String>,
    pub config: Value,
    pub format: Format,
    pub workers: Option<usize>,
    pub created_unix: u64,
    pub outputs: Vec<String>,
    pub experiments: Vec<Value>,
}

impl Manifest {
    pub fn new(
        subcommand: Subcommand,
        seed: u64,
        config_path: Option<&Path>,
        config_text: &str,
        format: Format,
        workers: Option<usize>,
    ) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            git_revision: revision(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: serde_json::from_str(config_text).unwrap_or(Value::Null),
            format,
            workers,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
            experiments: Vec::new(),
        }
    }
}

/// Revision of the checkout holding the running binary, else of the
/// working directory.
fn revision() -> Option<String> {
    let exe = std::env::current_exe().ok();
    git_revision(exe.as_deref().and_then(Path::parent)).or_else(|| git_revision(None))
}

/// `git rev-parse HEAD` run from `dir` (or the current directory).
pub fn git_revision(dir: Option<&Path>) -> Option<String> {
    let mut cmd = Process::new("git");
    cmd.args(["rev-parse", "HEAD"]);
    if let Some(d) = dir.filter(|d| !d.as_os_str().is_empty()) {
        cmd.current_dir(d);
    }
    let out = cmd.output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Writes results, artifacts and the manifest. Returns the written paths.
/// An outcome without experiments writes nothing.
pub fn write_outputs(
    outcome: &Outcome,
    out_dir: &Path,
    format: Format,
    mut manifest: Manifest,
) -> Result<Vec<PathBuf>> {
    if outcome.experiments.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let results = match format {
        Format::Csv => Artifact {
            name: "results.csv".into(),
            bytes: io::rows_to_csv(&outcome.rows)?,
        },
        Format::Json => Artifact {
            name: "results.json".into(),
            bytes: io::to_json_bytes(&outcome.rows),
        },
    };
    let mut written = Vec::new();
    for a in std::iter::once(&results).chain(&outcome.artifacts) {
        let path = out_dir.join(&a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| CliError::io(&path, e))?;
        manifest.outputs.push(a.name.clone());
        written.push(path);
    }
    manifest.experiments = outcome.experiments.clone();
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, io::to_json_bytes(&manifest)).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
