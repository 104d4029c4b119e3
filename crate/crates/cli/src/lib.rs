//! Command-line driver for genetic prompt search: contamination filtering,
//! sampling, dev sets, search, evaluation, self-training and reports.

pub mod commands;
pub mod config;
pub mod failure;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Session;
use crate::config::LoadedConfig;
use crate::failure::{ExitKind, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "promptsearch",
    version,
    about = "Genetic prompt search over a multitask registry"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "promptsearch.toml")]
    pub config: PathBuf,
    /// Serve every backend role from an in-process loopback mock.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel scoring and mutation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop training examples sharing an n-gram with any test example.
    Filter,
    /// Draw seeded training pools for a task.
    Sample {
        #[arg(long)]
        task: String,
    },
    /// Draw seeded dev sets for a task.
    DevSet {
        #[arg(long)]
        task: String,
    },
    /// Search prompts for a task.
    RunGps {
        #[arg(long)]
        task: String,
    },
    /// Score one template on a task's dev sets.
    Eval {
        #[arg(long)]
        task: String,
        #[arg(long)]
        template: String,
    },
    /// Grow training pools with confident pseudo-labels.
    SelfTrain {
        #[arg(long)]
        task: Option<String>,
    },
    /// Summarize every search report of the run.
    Report,
}

/// Runs a parsed command line; returns what to print on success.
pub fn run(cli: Cli) -> Result<String, Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure {
                kind: ExitKind::Usage,
                error: anyhow::anyhow!("--workers must be >= 1"),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                kind: ExitKind::Usage,
                error: e.into(),
            })?;
    }
    let mut cfg = LoadedConfig::load(&cli.config).map_err(anyhow::Error::from)?;
    cfg.finalize(cli.seed, cli.out).map_err(anyhow::Error::from)?;
    let session = Session::open(cfg, cli.mock)?;
    let out = match &cli.command {
        Command::Filter => commands::filter(&session),
        Command::Sample { task } => commands::sample(&session, task),
        Command::DevSet { task } => commands::dev_set(&session, task),
        Command::RunGps { task } => commands::run_gps_cmd(&session, task),
        Command::Eval { task, template } => commands::eval(&session, task, template),
        Command::SelfTrain { task } => commands::self_train_cmd(&session, task.as_deref()),
        Command::Report => commands::report(&session),
    }?;
    Ok(out)
}
