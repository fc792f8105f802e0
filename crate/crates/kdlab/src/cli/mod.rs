//! Command-line front end for the `kdlab` binary.
//!
//! A run is described by a flat dotted-key TOML file plus overrides:
//!
//! ```text
//! kdlab --config exp.toml --set train.seed=3 --kind distill --out runs
//! ```
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `--set` assignments in order, then `--kind` / `--out` / `--seed`. The
//! fully resolved config is written into the run directory before any
//! training starts. The process exits nonzero exactly when the run fails,
//! including a `losscheck` run with failing checks.

pub mod config;
pub mod losscheck;
pub mod runner;

#[cfg(test)]
mod tests;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use crate::distill::DistillError;
use crate::model::ModelError;
use crate::pipeline::PipelineError;

pub use config::{
    apply_file, apply_set, resolve, to_resolved_toml, BenchSettings, DistillSettings,
    ExperimentConfig, ModelShape, RunKind, DEFAULT_OUT_DIR, OUT_DIR_ENV,
};
pub use losscheck::{
    run_losscheck, CheckReport, ORACLE_INSTANCES, ORACLE_TOL, STAGE_GRAD_TOL, TERM_GRAD_TOL,
};
pub use runner::{emit_plot_data, run};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} loss checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

/// Teacher-student distillation experiments on synthetic planted-rule
/// tasks: teacher training, two-stage distillation, ablation grids, an
/// inference benchmark and a loss verification suite.
#[derive(Debug, Parser, Default)]
#[command(name = "kdlab", version)]
pub struct Args {
    /// Experiment config file (TOML with flat dotted keys, e.g. `train.seed = 7`).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key after the file, e.g. --set distill.rho=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output root; defaults to `out_dir`, then $KDLAB_OUT, then ./runs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Convenience seed applied to both task.seed and train.seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// train-teacher | distill | distill-one-stage | ablate | benchmark | losscheck.
    #[arg(long, value_name = "KIND")]
    pub kind: Option<String>,
}

/// Parses the process arguments, runs, and maps failure to a nonzero exit.
pub fn entry() -> ExitCode {
    let args = Args::parse();
    match resolve(&args).and_then(|cfg| run(&cfg).map(|_| ())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
