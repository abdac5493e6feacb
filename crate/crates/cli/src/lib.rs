//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps, posterior sampling and inspection.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numerical failure.

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// `print!` counterpart of `say!`.
macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use flowseg_core::data::DataError;
use flowseg_core::parallel::{thread_cap_from_env, with_threads, Execution};
use flowseg_core::pipeline::PipelineError;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Pipeline(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Pipeline(e) if e.is_io() => EXIT_IO,
            CliError::Pipeline(_) => EXIT_USAGE,
            CliError::Data(e) if e.is_io() => EXIT_IO,
            CliError::Data(_) => EXIT_USAGE,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowseg", version, about = "Bayesian segmentation with flow posteriors and latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run per-sample work on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

impl Common {
    pub fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Defaults, then the config file, then `--set`, then `--seed`.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string()).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(commands::GenDataArgs),
    /// Train a model and write checkpoints and per-epoch metrics.
    Train(commands::TrainArgs),
    /// Mean Dice of a checkpoint on one or more dataset files.
    Eval(commands::EvalArgs),
    /// Train and evaluate the five component combinations.
    Ablate(commands::AblateArgs),
    /// Draw posterior segmentation samples for one image.
    SamplePosterior(commands::SampleArgs),
    /// Summarise a dataset or checkpoint and dump images.
    Inspect(commands::InspectArgs),
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
        Command::SamplePosterior(a) => commands::sample_posterior(&a).map(|_| ()),
        Command::Inspect(a) => commands::inspect(&a),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match with_threads(thread_cap_from_env(), || execute(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
