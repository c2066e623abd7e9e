//! `archinfer` command-line driver.
//!
//! Exit codes: 0 success, 2 missing or unusable input artifact, 64 usage or
//! configuration error, 70 numeric or internal failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const EXIT_MISSING_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_FAILURE: u8 = 70;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(String),
    Failure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingInput(_) => EXIT_MISSING_INPUT,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(msg)
        } else {
            CliError::Failure(msg)
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::MissingInput(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<archinfer::Error> for CliError {
    fn from(e: archinfer::Error) -> Self {
        use archinfer::Error as E;
        match e {
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingInput(e.to_string())
            }
            E::Parse { .. } | E::FingerprintMismatch { .. } | E::Json(_) => {
                CliError::MissingInput(e.to_string())
            }
            E::InvalidInput(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "archinfer",
    version,
    about = "Architecture inference with a learned value network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets a configuration value, e.g. `--set dvn.train.max_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the synthetic task suite as CSV files plus a manifest.
    GenTasks(Common),
    /// Trains child models and records their validation accuracy.
    Populate {
        #[command(flatten)]
        common: Common,
        /// Continue an existing database instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Trains the value network on the database and writes a checkpoint.
    TrainDvn(Common),
    /// Predicts performance with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// A single flat encoding as a JSON array; the task's recorded
        /// encodings when absent.
        #[arg(long)]
        u: Option<String>,
    },
    /// Infers an architecture for a task without training any child model.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
    },
    /// Leave-one-task-out evaluation of the value network.
    EvaluateLoo {
        #[command(flatten)]
        common: Common,
        /// Comma separated modes, e.g. `no_meta,learned_meta`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Held-out quality as a function of the number of training tasks.
    StudyTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
    },
    /// Spread of task embeddings across batches, with a 2-D PCA export.
    StudyEmbeddings(Common),
    /// Children at inferred encodings versus random encodings.
    SearchEval(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTasks(c) => commands::gen_tasks(&commands::setup(&c)?),
        Command::Populate { common, resume } => {
            commands::populate(&commands::setup(&common)?, resume)
        }
        Command::TrainDvn(c) => commands::train_dvn(&commands::setup(&c)?),
        Command::Predict { common, task, u } => {
            commands::predict(&commands::setup(&common)?, &task, u.as_deref())
        }
        Command::Infer { common, task } => commands::infer(&commands::setup(&common)?, &task),
        Command::EvaluateLoo { common, mode } => {
            commands::evaluate_loo(&commands::setup(&common)?, mode.as_deref())
        }
        Command::StudyTasks { common, task } => {
            commands::study_tasks(&commands::setup(&common)?, task.as_deref())
        }
        Command::StudyEmbeddings(c) => commands::study_embeddings(&commands::setup(&c)?),
        Command::SearchEval(c) => commands::search_eval(&commands::setup(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
