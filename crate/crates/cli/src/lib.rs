//! Command-line front end: `train`, `check`, `analyze`, `place`, `bench`.
//!
//! Exit codes: 0 success, 1 failed assertion or run, 2 usage or config error.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use moelab::synth::{generate_corpus, plant_embeddings, Corpus};
use moelab::trainer::{train, TrainOutput};
use moelab::{MoeModel, Rng};

pub use commands::{analyze_traces, bench_objectives, place_trace, AnalyzeReport, BenchRow, PlaceReport};
pub use config::{PlacementOptions, RunConfig};

pub const OUTPUT_DIR_ENV: &str = "OUTPUT_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<moelab::Error> for CliError {
    fn from(e: moelab::Error) -> Self {
        match e {
            moelab::Error::Config(_) | moelab::Error::InvalidArgument(_) | moelab::Error::Format { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Sparse mixture-of-experts routing lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run randomized bound checks and stream one JSON report per suite.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the per-suite default trial count.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmaps, coupling, cluster agreement and stability of routing traces.
    Analyze {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path-aware expert placement and its dispatch cost.
    Place {
        trace: PathBuf,
        #[arg(long, default_value_t = 2)]
        shards: usize,
        #[arg(long)]
        penalty: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time training steps under each auxiliary objective.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--out`, then `OUTPUT_DIR`, then the config's `out`.
pub fn output_dir(flag: Option<&Path>, from_config: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| from_config.map(Path::to_path_buf))
}

/// Corpus and initialized model for a resolved config.
pub fn prepare(cfg: &RunConfig) -> moelab::Result<(MoeModel, Corpus)> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.synth)?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = MoeModel::new(cfg.model.clone(), &mut rng)?;
    if cfg.plant_embeddings {
        plant_embeddings(&mut model, &corpus.allocation, cfg.synth.embed_sep, &mut rng)?;
    }
    Ok((model, corpus))
}

pub fn run_training(cfg: &RunConfig, out: Option<&Path>) -> moelab::Result<TrainOutput> {
    let cfg = cfg.clone().resolved();
    let (model, corpus) = prepare(&cfg)?;
    train(model, &corpus, &cfg.train, out)
}

/// Parses `args` and runs the command, writing reports to `stdout` and
/// diagnostics to `stderr`. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match commands::dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
