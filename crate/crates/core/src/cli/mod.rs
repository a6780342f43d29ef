//! Command-line front end: configuration, orchestration and artifact
//! writing for every pipeline of the crate.

mod commands;
pub mod config;
mod data;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use config::{ExperimentConfig, Method, DATA_DIR_ENV};
pub use data::Datasets;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING_ABORT: i32 = 3;
pub const EXIT_NO_SUCCESS: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    TrainingAbort(String),
    #[error("no successful work: {0}")]
    NoSuccess(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::TrainingAbort(_) => EXIT_TRAINING_ABORT,
            CliError::NoSuccess(_) => EXIT_NO_SUCCESS,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fiberlab", version, about = "Sample, train and benchmark fiber models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config, or JSON when the name ends in `.json`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for guided sampling.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory (gen-data defaults to $FIBERLAB_DATA_DIR).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train the unconditional prior on the configured dataset.
    TrainPrior,
    /// Train the conditional flow baseline.
    TrainConditional,
    /// Train an autoencoder on gray grids or colored images.
    TrainAe,
    /// Guided samples on the fibers of selected held-out targets.
    SampleFiber {
        /// Held-out target indices, comma separated.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<usize>>,
        /// Samples per target.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fidelity and consistency of the configured methods.
    Evaluate,
    /// Sweep guidance strength or the fiber-loss weight.
    Sweep,
    /// Latent and pixel-space refinement of guided samples.
    Refine,
    /// Write the glyph dataset as IDX files with a preview.
    GenData,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainPrior => "train-prior",
            Command::TrainConditional => "train-conditional",
            Command::TrainAe => "train-ae",
            Command::SampleFiber { .. } => "sample-fiber",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Refine => "refine",
            Command::GenData => "gen-data",
        }
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    } else if matches!(cli.command, Command::GenData) {
        if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
            cfg.out = PathBuf::from(d);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let mut ctx = RunContext::new(cli.command.name(), cfg)?;
    let result = commands::dispatch(&cli.command, &mut ctx);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    };
    ctx.finish(&status)?;
    result
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("fiberlab {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Output directory of one command with the provenance every artifact
/// carries.
pub struct RunContext {
    pub command: &'static str,
    pub cfg: ExperimentConfig,
    pub hash: String,
    files: Vec<PathBuf>,
}

impl RunContext {
    pub fn new(command: &'static str, cfg: ExperimentConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("out: {}: {e}", cfg.out.display())))?;
        Ok(Self {
            command,
            hash: cfg.hash(),
            cfg,
            files: Vec::new(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn stamp(&self) -> String {
        format!("config_hash={} seed={}", self.hash, self.cfg.seed)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    pub fn record(&mut self, p: PathBuf) {
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
        self.record(p.clone());
        Ok(p)
    }

    /// Writes a CSV whose first line is a `# config_hash=... seed=...`
    /// comment.
    pub fn write_csv<F>(&mut self, name: &str, body: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        writeln!(buf, "# {}", self.stamp()).map_err(CliError::runtime)?;
        body(&mut buf).map_err(CliError::runtime)?;
        self.write(name, &buf)
    }

    fn finish(&mut self, status: &str) -> Result<(), CliError> {
        let manifest_path = self.path(MANIFEST_FILE);
        let files = self
            .files
            .iter()
            .filter(|p| **p != manifest_path)
            .map(|p| p.strip_prefix(&self.cfg.out).unwrap_or(p).display().to_string())
            .collect();
        let m = Manifest {
            command: self.command,
            status,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            threads: self.cfg.threads,
            files,
            config: &self.cfg,
        };
        let json = serde_json::to_string_pretty(&m).map_err(CliError::runtime)?;
        std::fs::write(&manifest_path, json).map_err(|e| CliError::runtime(format!("{}: {e}", manifest_path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::TrainingAbort(String::new()).exit_code(), 3);
        assert_eq!(CliError::NoSuccess(String::new()).exit_code(), 4);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 1);
    }

    #[test]
    fn flags_override_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cli = Cli::parse_from([
            "fiberlab",
            "evaluate",
            "--seed",
            "7",
            "--threads",
            "3",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.threads), (7, 3));
        assert_eq!(cfg.out, dir.path());
    }

    #[test]
    fn hash_ignores_threads_and_out() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ExperimentConfig {
            out: dir.path().join("a"),
            ..ExperimentConfig::default()
        };
        let h1 = RunContext::new("x", a.clone()).unwrap().hash;
        a.threads = 4;
        a.out = dir.path().join("b");
        assert_eq!(RunContext::new("x", a).unwrap().hash, h1);
    }
}
