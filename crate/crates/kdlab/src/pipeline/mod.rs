//! Experiment plumbing: synthetic planted-rule tasks, teacher training,
//! the two-stage distillation loop, ablation sweeps and a small inference
//! benchmark.
//!
//! Every run is seed-deterministic: identical configs and seeds produce
//! bitwise-identical model checkpoints and metric records, with wall-clock
//! fields as the only exception.

pub mod ablate;
pub mod bench;
pub mod data;
pub mod train;


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DistillConfig, DistillError, LossReport};
use crate::model::{ModelConfig, ModelError};
use crate::numerics::TensorError;
use crate::optim::OptimizerKind;

pub use ablate::{
    ablation_suite, expected_cell_count, split_count_sweep, AblationBase, AblationOutcome,
    AblationReport, HEAD_SWEEP, SPLIT_MODES,
};
pub use bench::{benchmark_inference, TimingRecord, BENCH_BATCH_SIZES};
pub use data::{generate_task, Dataset, Sample, SampleLabel, SyntheticTaskSpec};
pub use train::{
    distill, distill_one_stage, evaluate, train_hard_label, train_teacher, DistillOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Training hit a non-finite loss. `last_good` holds the checkpoint of
    /// the most recent weights whose loss was still finite.
    #[error("non-finite loss in {stage} at step {step}; last good checkpoint retained")]
    Diverged {
        stage: &'static str,
        step: u64,
        last_good: Vec<u8>,
    },
}

pub type PipelineResult<T> = Result<T, PipelineError>;

/// Budgets and optimizer settings shared by teacher training, hard-label
/// baselines and distillation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epoch cap for cross-entropy (teacher / hard-label) training; those
    /// runs may stop earlier on an eval-accuracy plateau.
    pub teacher_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> PipelineResult<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(PipelineError::InvalidConfig(format!(
                    "grad_clip must be positive, got {}",
                    clip
                )));
            }
        }
        Ok(())
    }
}

/// One metric event: a training step (loss fields filled) or an eval pass
/// (accuracy filled). Eval events reuse the step index they follow, so the
/// index is non-decreasing over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub config_hash: String,
    pub stage: String,
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Cross-entropy value for hard-label phases.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    pub wall_ms: f64,
}

/// Full append-only log of one run plus its headline results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub records: Vec<MetricRecord>,
    pub final_eval_accuracy: f64,
    pub param_count: usize,
    pub wall_ms_total: f64,
}

impl RunRecord {
    /// Copy with all wall-clock fields zeroed; everything left is covered
    /// by the determinism guarantee.
    pub fn without_wall_clock(&self) -> RunRecord {
        let mut out = self.clone();
        out.wall_ms_total = 0.0;
        for r in &mut out.records {
            r.wall_ms = 0.0;
        }
        out
    }

    /// Streams the records as newline-delimited JSON, one event per line.
    pub fn write_ndjson(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            writeln!(w, "{}", line)?;
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// 64-bit FNV-1a of the bytes as 16 hex digits. Stable across runs and
/// platforms; used to tag runs with their full configuration.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a(bytes))
}

#[derive(Serialize)]
struct RunKey<'a> {
    kind: &'a str,
    task: &'a data::SyntheticTaskSpec,
    teacher: Option<&'a ModelConfig>,
    student: Option<&'a ModelConfig>,
    distill: Option<&'a DistillConfig>,
    train: &'a TrainConfig,
}

/// `(run_id, config_hash)` identifying one run. The hash covers the task,
/// both model configs, the distillation config and the training config;
/// the id additionally spells out the run kind and seed.
pub fn run_identity(
    kind: &str,
    task: &data::SyntheticTaskSpec,
    teacher: Option<&ModelConfig>,
    student: Option<&ModelConfig>,
    distill_cfg: Option<&DistillConfig>,
    train_cfg: &TrainConfig,
) -> (String, String) {
    let key = RunKey {
        kind,
        task,
        teacher,
        student,
        distill: distill_cfg,
        train: train_cfg,
    };
    let json = serde_json::to_string(&key).expect("config types serialize");
    let hash = fingerprint(json.as_bytes());
    (format!("{}-{}-s{}", kind, hash, train_cfg.seed), hash)
}
