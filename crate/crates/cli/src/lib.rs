//! `pivot` command-line driver: environment generation, teacher data,
//! decomposition, profiling, filtering, training, evaluation, diversity
//! export, verification sweeps and training reports.
//!
//! Exit codes: 0 on success, 1 on usage, validation or I/O failure, 2 when a
//! verification check exceeds its tolerance.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod report;
pub mod verify;

use config::{ParamArgs, Params};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] pivot_core::pipeline::PipelineError),
    #[error(transparent)]
    Trainer(#[from] pivot_core::trainer::TrainerError),
    #[error(transparent)]
    Record(#[from] pivot_core::record::RecordError),
    #[error(transparent)]
    Checkpoint(#[from] pivot_core::policy::CheckpointError),
    #[error(transparent)]
    Synth(#[from] pivot_core::synth::SynthError),
    #[error(transparent)]
    Mdp(#[from] pivot_core::MdpError),
    #[error(transparent)]
    Values(#[from] pivot_core::values::ValuesError),
    #[error(transparent)]
    Theory(#[from] pivot_core::theory::TheoryError),
    #[error(transparent)]
    Policy(#[from] pivot_core::PolicyError),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::VerificationFailed(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pivot",
    version,
    about = "Pivot-state mining and turn-level policy optimization"
)]
pub struct Cli {
    /// Flat TOML file with parameter values; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic environment suite file.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect an environment suite.
    Env {
        #[command(subcommand)]
        action: EnvAction,
    },
    /// Generate teacher trajectories, one per context.
    Teach {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split trajectories into (state, expert turn) candidates.
    Decompose {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile candidates with K rollouts of the reference policy.
    Profile {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference policy checkpoint; defaults to the suite prior.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Keep the candidates matching `--tag`.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a filtered dataset.
    Train {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference policy checkpoint; defaults to the suite prior.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Success rate of a policy over the suite.
    Eval {
        #[arg(long)]
        env: PathBuf,
        /// Policy checkpoint; defaults to the reference policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resampling diversity per candidate prefix, as CSV.
    Diversity {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Numerical verification sweeps.
    Verify {
        #[command(subcommand)]
        target: VerifyTarget,
    },
    /// Per-step metric tables from training logs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EnvAction {
    /// Print the structure of every context.
    Describe {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VerifyTarget {
    /// Random-instance sweeps of the single-state identities.
    Theorems {
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-value checks on every context of a suite.
    Values {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one invocation and returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                let mut out = std::io::stdout().lock();
                let _ = writeln!(out, "{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses parameters and dispatches; returns a one-line summary for stdout.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let params = Params::load(cli.params, cli.config.as_deref())?;
    commands::dispatch(&cli.command, &params)
}
