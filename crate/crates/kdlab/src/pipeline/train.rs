//! Training loops: cross-entropy teacher/baseline training, the two-stage
//! distillation procedure and its single-phase variant.
//!
//! All loops share one step driver: shuffle per epoch, compute the loss,
//! verify it is finite, snapshot the weights, then update. A non-finite
//! loss aborts the run and hands back the snapshot taken after the last
//! finite step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{stage1_loss, stage2_loss, DistillConfig, LossReport};
use crate::model::{
    count_params, init_projection, model_to_bytes, Batch, EncoderOutputs, Labels, Logits, Model,
    ModelConfig, SampleOutputs, TaskKind,
};
use crate::numerics::{cross_entropy_rows, vconcat, Tensor};
use crate::optim::Optimizer;

use super::data::{Dataset, SyntheticTaskSpec};
use super::{run_identity, MetricRecord, PipelineError, PipelineResult, RunRecord, TrainConfig};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;
/// Consecutive epochs without eval improvement before teacher training
/// stops early.
const PLATEAU_PATIENCE: usize = 3;

// Seed salts keeping the learned projections decorrelated from the
// student init while staying reproducible from the run seed alone.
pub(crate) const W_H_SEED_SALT: u64 = 0xa076_1d64_78bd_642f;
pub(crate) const W_G_SEED_SALT: u64 = 0xe703_7ed1_a0b4_28db;

/// Result of a distillation run: the trained student, the learned
/// projections from both stages and the metric log.
pub struct DistillOutcome {
    pub student: Model,
    /// Hidden-state projection (d_S × d_T) trained in stage 1.
    pub w_h: Tensor,
    /// Contrastive projection (d_S × d_T) trained in stage 2.
    pub w_g: Tensor,
    pub run: RunRecord,
}

/// Deterministic per-epoch sample order. The stage tag keeps phases of the
/// same run on distinct shuffle streams.
pub(crate) fn epoch_indices(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mixed = seed
        ^ super::fnv1a(stage.as_bytes())
        ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    indices
}

fn argmax_row(row: &[f64]) -> usize {
    // Strictly-greater scan: ties resolve toward the lowest class index.
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of `model` on `eval`: argmax over classes per sequence, or per
/// labeled position for token tasks.
pub fn evaluate(model: &Model, eval: &Dataset) -> PipelineResult<f64> {
    if model.config.task_kind != eval.kind() {
        return Err(PipelineError::InvalidConfig(format!(
            "model solves a {} task but the eval set is {}",
            model.config.task_kind.as_str(),
            eval.kind().as_str()
        )));
    }
    if eval.is_empty() {
        return Err(PipelineError::InvalidConfig("empty eval set".into()));
    }
    let frozen = model.freeze();
    let indices: Vec<usize> = (0..eval.len()).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = eval.batch(chunk);
        let out = frozen.encoder_forward(&batch)?;
        match (&out.logits, &batch.labels) {
            (Logits::PerSequence(z), Labels::PerSequence(labels)) => {
                let (rows, cols) = z.shape();
                let v = z.to_vec();
                for (i, &label) in labels.iter().enumerate().take(rows) {
                    if argmax_row(&v[i * cols..(i + 1) * cols]) == label {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            (Logits::PerToken(zs), Labels::PerToken(rows)) => {
                for (z, row) in zs.iter().zip(rows) {
                    let cols = z.shape().1;
                    let v = z.to_vec();
                    for (j, slot) in row.iter().enumerate() {
                        if let Some(label) = slot {
                            if argmax_row(&v[j * cols..(j + 1) * cols]) == *label {
                                correct += 1;
                            }
                            total += 1;
                        }
                    }
                }
            }
            _ => unreachable!("kind equality checked above"),
        }
    }
    Ok(correct as f64 / total as f64)
}

fn dataset_fits(config: &ModelConfig, spec: &SyntheticTaskSpec) -> PipelineResult<()> {
    if config.task_kind != spec.kind {
        return Err(PipelineError::InvalidConfig(format!(
            "model task kind {} does not match task kind {}",
            config.task_kind.as_str(),
            spec.kind.as_str()
        )));
    }
    if spec.seq_len > config.max_seq_len {
        return Err(PipelineError::InvalidConfig(format!(
            "task sequences of length {} exceed the model's max_seq_len {}",
            spec.seq_len, config.max_seq_len
        )));
    }
    if spec.vocab_size > config.vocab_size {
        return Err(PipelineError::InvalidConfig(format!(
            "task vocab {} exceeds the model's vocab {}",
            spec.vocab_size, config.vocab_size
        )));
    }
    if spec.num_classes != config.num_classes {
        return Err(PipelineError::InvalidConfig(format!(
            "task has {} classes but the model emits {}",
            spec.num_classes, config.num_classes
        )));
    }
    Ok(())
}

fn check_split(train: &Dataset, eval: &Dataset) -> PipelineResult<()> {
    if train.spec != eval.spec {
        return Err(PipelineError::InvalidConfig(
            "train and eval sets come from different task specs".into(),
        ));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "train and eval sets must both be non-empty".into(),
        ));
    }
    Ok(())
}

/// Mean cross-entropy of a batch. Token tasks average globally over
/// labeled positions, weighting each sample by its labeled count.
fn cross_entropy_batch(out: &EncoderOutputs, labels: &Labels) -> PipelineResult<Tensor> {
    match (&out.logits, labels) {
        (Logits::PerSequence(z), Labels::PerSequence(l)) => {
            Ok(cross_entropy_rows(z, l, None)?)
        }
        (Logits::PerToken(zs), Labels::PerToken(rows)) => {
            let mut weighted = Vec::new();
            let mut total = 0usize;
            for (z, row) in zs.iter().zip(rows) {
                let keep: Vec<bool> = row.iter().map(Option::is_some).collect();
                let kept = keep.iter().filter(|&&k| k).count();
                if kept == 0 {
                    continue;
                }
                let ids: Vec<usize> = row.iter().map(|slot| slot.unwrap_or(0)).collect();
                weighted.push(cross_entropy_rows(z, &ids, Some(&keep))?.scale(kept as f64));
                total += kept;
            }
            if total == 0 {
                return Err(PipelineError::InvalidConfig(
                    "batch carries no labeled positions".into(),
                ));
            }
            let mut sum = weighted[0].clone();
            for t in &weighted[1..] {
                sum = sum.add(t)?;
            }
            Ok(sum.scale(1.0 / total as f64))
        }
        _ => Err(PipelineError::InvalidConfig(
            "logit kind does not match label kind".into(),
        )),
    }
}

/// Mutable bookkeeping threaded through a run's phases.
struct RunState {
    run_id: String,
    config_hash: String,
    records: Vec<MetricRecord>,
    step: u64,
    last_good: Vec<u8>,
    last_acc: Option<f64>,
}

impl RunState {
    fn new(run_id: String, config_hash: String, model: &Model) -> PipelineResult<RunState> {
        Ok(RunState {
            run_id,
            config_hash,
            records: Vec::new(),
            step: 0,
            last_good: model_to_bytes(model)?,
            last_acc: None,
        })
    }

    fn finish(self, start: Instant, model_config: &ModelConfig, eval_acc: f64) -> RunRecord {
        RunRecord {
            run_id: self.run_id,
            config_hash: self.config_hash,
            records: self.records,
            final_eval_accuracy: eval_acc,
            param_count: count_params(model_config),
            wall_ms_total: start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

struct Phase {
    stage: &'static str,
    epochs: usize,
    /// Stop after this many consecutive epochs without eval improvement.
    patience: Option<usize>,
    /// Record the scalar loss as `train_loss` (hard-label phases).
    record_train_loss: bool,
}

/// Runs one training phase: per-epoch shuffles, one optimizer step per
/// batch, one eval per epoch. `step_loss` maps a batch (and its dataset
/// indices) to the loss tensor plus its per-term report.
fn run_phase(
    state: &mut RunState,
    phase: &Phase,
    model: &Model,
    opt: &mut Optimizer,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    mut step_loss: impl FnMut(&[usize], &Batch) -> PipelineResult<(Tensor, LossReport)>,
) -> PipelineResult<()> {
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 0..phase.epochs {
        for chunk in epoch_indices(train.len(), tcfg.seed, phase.stage, epoch)
            .chunks(tcfg.batch_size)
        {
            let step_start = Instant::now();
            let batch = train.batch(chunk);
            let (loss, report) = step_loss(chunk, &batch)?;
            state.step += 1;
            let value = loss.to_vec()[0];
            if !value.is_finite() {
                return Err(PipelineError::Diverged {
                    stage: phase.stage,
                    step: state.step,
                    last_good: std::mem::take(&mut state.last_good),
                });
            }
            state.last_good = model_to_bytes(model)?;
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            state.records.push(MetricRecord {
                run_id: state.run_id.clone(),
                config_hash: state.config_hash.clone(),
                stage: phase.stage.into(),
                step: state.step,
                losses: report,
                train_loss: phase.record_train_loss.then_some(value),
                learning_rate: Some(tcfg.learning_rate),
                eval_accuracy: None,
                wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let eval_start = Instant::now();
        let acc = evaluate(model, eval)?;
        state.last_acc = Some(acc);
        state.records.push(MetricRecord {
            run_id: state.run_id.clone(),
            config_hash: state.config_hash.clone(),
            stage: phase.stage.into(),
            step: state.step,
            losses: LossReport::default(),
            train_loss: None,
            learning_rate: None,
            eval_accuracy: Some(acc),
            wall_ms: eval_start.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(patience) = phase.patience {
            if acc > best {
                best = acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn run_cross_entropy(
    kind: &'static str,
    stage: &'static str,
    epochs: usize,
    patience: Option<usize>,
    model_config: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<(Model, RunRecord)> {
    tcfg.validate()?;
    model_config.validate()?;
    dataset_fits(model_config, &train.spec)?;
    check_split(train, eval)?;
    let (run_id, config_hash) =
        run_identity(kind, &train.spec, Some(model_config), None, None, tcfg);
    let start = Instant::now();
    let model = Model::new(model_config, tcfg.seed)?;
    let mut opt = Optimizer::new(
        tcfg.optimizer,
        model.parameters(),
        tcfg.learning_rate,
        tcfg.grad_clip,
    );
    let mut state = RunState::new(run_id, config_hash, &model)?;
    let phase = Phase {
        stage,
        epochs,
        patience,
        record_train_loss: true,
    };
    run_phase(
        &mut state,
        &phase,
        &model,
        &mut opt,
        tcfg,
        train,
        eval,
        |_, batch| {
            let out = model.encoder_forward(batch)?;
            let loss = cross_entropy_batch(&out, &batch.labels)?;
            Ok((loss, LossReport::default()))
        },
    )?;
    let final_acc = match state.last_acc {
        Some(acc) => acc,
        None => evaluate(&model, eval)?,
    };
    let run = state.finish(start, model_config, final_acc);
    Ok((model, run))
}

/// Cross-entropy training of a teacher up to `teacher_epochs`, stopping
/// early once eval accuracy has not improved for a few epochs. Returns the
/// model frozen.
pub fn train_teacher(
    model_config: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<(Model, RunRecord)> {
    let (model, run) = run_cross_entropy(
        "teacher",
        "teacher",
        tcfg.teacher_epochs,
        Some(PLATEAU_PATIENCE),
        model_config,
        tcfg,
        train,
        eval,
    )?;
    Ok((model.freeze(), run))
}

/// Hard-label baseline: the same architecture trained on the task labels
/// alone, with the combined epoch budget of the two distillation stages so
/// comparisons are budget-fair. No early stopping.
pub fn train_hard_label(
    model_config: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<(Model, RunRecord)> {
    run_cross_entropy(
        "hard-label",
        "hard_label",
        tcfg.stage1_epochs + tcfg.stage2_epochs,
        None,
        model_config,
        tcfg,
        train,
        eval,
    )
}

/// Per-sample teacher outputs computed once up front. The teacher is
/// frozen, so its activations carry no graph and can be reassembled into
/// batches at zero forward cost.
struct TeacherCache {
    kind: TaskKind,
    samples: Vec<SampleOutputs>,
    pooled_rows: Vec<Tensor>,
    logit_rows: Vec<Tensor>,
}

fn cache_teacher_outputs(teacher: &Model, train: &Dataset) -> PipelineResult<TeacherCache> {
    let mut samples = Vec::with_capacity(train.len());
    let mut pooled_rows = Vec::with_capacity(train.len());
    let mut logit_rows = Vec::with_capacity(train.len());
    for i in 0..train.len() {
        let out = teacher.encoder_forward(&train.batch(&[i]))?;
        pooled_rows.push(out.pooled);
        match out.logits {
            Logits::PerSequence(z) => logit_rows.push(z),
            Logits::PerToken(mut zs) => logit_rows.push(zs.pop().expect("singleton batch")),
        }
        samples.push(out.samples.into_iter().next().expect("singleton batch"));
    }
    Ok(TeacherCache {
        kind: teacher.config.task_kind,
        samples,
        pooled_rows,
        logit_rows,
    })
}

impl TeacherCache {
    fn assemble(&self, indices: &[usize]) -> PipelineResult<EncoderOutputs> {
        let samples: Vec<SampleOutputs> =
            indices.iter().map(|&i| self.samples[i].clone()).collect();
        let pooled_parts: Vec<Tensor> =
            indices.iter().map(|&i| self.pooled_rows[i].clone()).collect();
        let pooled = vconcat(&pooled_parts)?;
        let logits = match self.kind {
            TaskKind::Sequence => {
                let rows: Vec<Tensor> =
                    indices.iter().map(|&i| self.logit_rows[i].clone()).collect();
                Logits::PerSequence(vconcat(&rows)?)
            }
            TaskKind::Token => Logits::PerToken(
                indices.iter().map(|&i| self.logit_rows[i].clone()).collect(),
            ),
        };
        Ok(EncoderOutputs {
            samples,
            pooled,
            logits,
        })
    }
}

fn preflight_distill(
    teacher: &Model,
    student_config: &ModelConfig,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<()> {
    tcfg.validate()?;
    student_config.validate()?;
    dcfg.validate_for(&teacher.config, student_config)?;
    dataset_fits(&teacher.config, &train.spec)?;
    dataset_fits(student_config, &train.spec)?;
    check_split(train, eval)
}

/// The two-stage distillation procedure. Stage 1 trains the student
/// encoder and W_h against the teacher's embeddings, attention relations
/// and hidden states; stage 2 continues from those weights and trains all
/// student parameters plus W_g against the teacher's sample relations and
/// predictions. The teacher is never updated.
pub fn distill(
    teacher: &Model,
    student_config: &ModelConfig,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<DistillOutcome> {
    preflight_distill(teacher, student_config, dcfg, tcfg, train, eval)?;
    let (run_id, config_hash) = run_identity(
        "distill",
        &train.spec,
        Some(&teacher.config),
        Some(student_config),
        Some(dcfg),
        tcfg,
    );
    let start = Instant::now();
    let teacher = teacher.freeze();
    let cache = cache_teacher_outputs(&teacher, train)?;
    let student = Model::new(student_config, tcfg.seed)?;
    let d_s = student_config.hidden_dim;
    let d_t = teacher.config.hidden_dim;
    let w_h = init_projection(d_s, d_t, tcfg.seed ^ W_H_SEED_SALT);
    let w_g = init_projection(d_s, d_t, tcfg.seed ^ W_G_SEED_SALT);
    let mut state = RunState::new(run_id, config_hash, &student)?;

    let mut stage1_params = student.encoder_parameters();
    stage1_params.push(w_h.clone());
    let mut opt = Optimizer::new(
        tcfg.optimizer,
        stage1_params,
        tcfg.learning_rate,
        tcfg.grad_clip,
    );
    run_phase(
        &mut state,
        &Phase {
            stage: "stage1",
            epochs: tcfg.stage1_epochs,
            patience: None,
            record_train_loss: false,
        },
        &student,
        &mut opt,
        tcfg,
        train,
        eval,
        |chunk, batch| {
            let teacher_out = cache.assemble(chunk)?;
            let student_out = student.encoder_forward(batch)?;
            Ok(stage1_loss(
                &teacher_out,
                &student_out,
                dcfg,
                &w_h,
                &batch.attention_mask,
            )?)
        },
    )?;

    // Stage 2 continues from the stage-1 weights with fresh optimizer
    // state over the full student plus W_g.
    let mut stage2_params = student.parameters();
    stage2_params.push(w_g.clone());
    let mut opt = Optimizer::new(
        tcfg.optimizer,
        stage2_params,
        tcfg.learning_rate,
        tcfg.grad_clip,
    );
    run_phase(
        &mut state,
        &Phase {
            stage: "stage2",
            epochs: tcfg.stage2_epochs,
            patience: None,
            record_train_loss: false,
        },
        &student,
        &mut opt,
        tcfg,
        train,
        eval,
        |chunk, batch| {
            let teacher_out = cache.assemble(chunk)?;
            let student_out = student.encoder_forward(batch)?;
            Ok(stage2_loss(
                &teacher_out,
                &student_out,
                &batch.labels,
                dcfg,
                &w_g,
                &batch.attention_mask,
            )?)
        },
    )?;

    let final_acc = match state.last_acc {
        Some(acc) => acc,
        None => evaluate(&student, eval)?,
    };
    let run = state.finish(start, student_config, final_acc);
    Ok(DistillOutcome {
        student,
        w_h,
        w_g,
        run,
    })
}

fn merge_reports(r1: LossReport, r2: LossReport) -> LossReport {
    LossReport {
        emb: r1.emb,
        mha: r1.mha,
        ffn: r1.ffn,
        mha_on_ffn: r1.mha_on_ffn,
        ffn_on_attn: r1.ffn_on_attn,
        ss: r2.ss,
        sc: r2.sc,
        kd: r2.kd,
        stage1_total: r1.stage1_total,
        stage2_total: r2.stage2_total,
    }
}

/// Single-phase variant: minimizes the sum of every enabled term from both
/// stages at once, over the combined epoch budget, updating the full
/// student plus both projections.
pub fn distill_one_stage(
    teacher: &Model,
    student_config: &ModelConfig,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
) -> PipelineResult<DistillOutcome> {
    preflight_distill(teacher, student_config, dcfg, tcfg, train, eval)?;
    let (run_id, config_hash) = run_identity(
        "distill-one-stage",
        &train.spec,
        Some(&teacher.config),
        Some(student_config),
        Some(dcfg),
        tcfg,
    );
    let start = Instant::now();
    let teacher = teacher.freeze();
    let cache = cache_teacher_outputs(&teacher, train)?;
    let student = Model::new(student_config, tcfg.seed)?;
    let d_s = student_config.hidden_dim;
    let d_t = teacher.config.hidden_dim;
    let w_h = init_projection(d_s, d_t, tcfg.seed ^ W_H_SEED_SALT);
    let w_g = init_projection(d_s, d_t, tcfg.seed ^ W_G_SEED_SALT);
    let mut state = RunState::new(run_id, config_hash, &student)?;

    let mut params = student.parameters();
    params.push(w_h.clone());
    params.push(w_g.clone());
    let mut opt = Optimizer::new(tcfg.optimizer, params, tcfg.learning_rate, tcfg.grad_clip);
    run_phase(
        &mut state,
        &Phase {
            stage: "one_stage",
            epochs: tcfg.stage1_epochs + tcfg.stage2_epochs,
            patience: None,
            record_train_loss: false,
        },
        &student,
        &mut opt,
        tcfg,
        train,
        eval,
        |chunk, batch| {
            let teacher_out = cache.assemble(chunk)?;
            let student_out = student.encoder_forward(batch)?;
            let (l1, r1) = stage1_loss(
                &teacher_out,
                &student_out,
                dcfg,
                &w_h,
                &batch.attention_mask,
            )?;
            let (l2, r2) = stage2_loss(
                &teacher_out,
                &student_out,
                &batch.labels,
                dcfg,
                &w_g,
                &batch.attention_mask,
            )?;
            Ok((l1.add(&l2)?, merge_reports(r1, r2)))
        },
    )?;

    let final_acc = match state.last_acc {
        Some(acc) => acc,
        None => evaluate(&student, eval)?,
    };
    let run = state.finish(start, student_config, final_acc);
    Ok(DistillOutcome {
        student,
        w_h,
        w_g,
        run,
    })
}
