//! Ablation sweeps over one shared teacher: student head counts, split
//! counts, split modes, leave-one-out loss terms, distillation positions
//! and one- vs two-stage training. Every cell is an independent run tagged
//! with its own config hash.

use crate::distill::{DistillConfig, SplitMode, Stage1Terms};
use crate::model::ModelConfig;

use super::data::{generate_task, SyntheticTaskSpec};
use super::train::{distill, distill_one_stage, train_teacher, DistillOutcome};
use super::{PipelineError, PipelineResult, RunRecord, TrainConfig};

/// Student head counts exercised by the head-count family.
pub const HEAD_SWEEP: [usize; 3] = [12, 6, 3];
pub const SPLIT_MODES: [SplitMode; 3] = [SplitMode::Concat, SplitMode::Average, SplitMode::Random];

const LOO_CELLS: [&str; 5] = ["no_emb", "no_mha", "no_ffn", "no_ss", "no_sc"];

#[derive(Debug, Clone)]
pub struct AblationBase {
    pub task: SyntheticTaskSpec,
    pub teacher_config: ModelConfig,
    pub student_config: ModelConfig,
    pub dcfg: DistillConfig,
    pub tcfg: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    /// Sweep family, e.g. "heads" or "terms".
    pub group: String,
    /// Cell within the family, e.g. "heads-6".
    pub cell: String,
    /// Architecture the cell trained (the head sweep varies it).
    pub student_config: ModelConfig,
    pub eval_accuracy: f64,
    pub run: RunRecord,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub teacher_run: RunRecord,
    pub cells: Vec<AblationOutcome>,
}

/// Split counts that evenly divide both head counts, ascending.
pub fn split_count_sweep(teacher_heads: usize, student_heads: usize) -> Vec<usize> {
    (1..=teacher_heads.min(student_heads))
        .filter(|a| teacher_heads % a == 0 && student_heads % a == 0)
        .collect()
}

/// Number of cells `ablation_suite` emits for this base.
pub fn expected_cell_count(base: &AblationBase) -> usize {
    HEAD_SWEEP.len()
        + split_count_sweep(base.teacher_config.num_heads, base.student_config.num_heads).len()
        + SPLIT_MODES.len()
        + LOO_CELLS.len()
        + 3 // distillation positions: base, ffn at both sub-layers, mha at both
        + 2 // two-stage vs one-stage
}

fn head_sweep_feasible(base: &AblationBase) -> PipelineResult<()> {
    for &h in &HEAD_SWEEP {
        if base.teacher_config.num_heads % h != 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "head sweep needs {} splits to divide the teacher's {} heads",
                h, base.teacher_config.num_heads
            )));
        }
        if base.student_config.hidden_dim % h != 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "head sweep needs student hidden_dim {} divisible by {} heads",
                base.student_config.hidden_dim, h
            )));
        }
    }
    Ok(())
}

/// Runs the full grid against one teacher trained up front. Deterministic
/// given the base: cell order, run ids and every metric value are fixed by
/// the configs and seeds alone.
pub fn ablation_suite(base: &AblationBase) -> PipelineResult<AblationReport> {
    head_sweep_feasible(base)?;
    let (train, eval) = generate_task(&base.task)?;
    let (teacher, teacher_run) = train_teacher(&base.teacher_config, &base.tcfg, &train, &eval)?;

    let mut cells = Vec::with_capacity(expected_cell_count(base));
    let mut push = |group: &str, cell: String, outcome: DistillOutcome| {
        cells.push(AblationOutcome {
            group: group.into(),
            cell,
            student_config: outcome.student.config.clone(),
            eval_accuracy: outcome.run.final_eval_accuracy,
            run: outcome.run,
        });
    };

    for &h in &HEAD_SWEEP {
        let mut student = base.student_config.clone();
        student.num_heads = h;
        let mut dcfg = base.dcfg.clone();
        dcfg.split.num_splits = h;
        let out = distill(&teacher, &student, &dcfg, &base.tcfg, &train, &eval)?;
        push("heads", format!("heads-{}", h), out);
    }

    for a in split_count_sweep(base.teacher_config.num_heads, base.student_config.num_heads) {
        let mut dcfg = base.dcfg.clone();
        dcfg.split.num_splits = a;
        let out = distill(&teacher, &base.student_config, &dcfg, &base.tcfg, &train, &eval)?;
        push("splits", format!("splits-{}", a), out);
    }

    for &mode in &SPLIT_MODES {
        let mut dcfg = base.dcfg.clone();
        dcfg.split.mode = mode;
        let out = distill(&teacher, &base.student_config, &dcfg, &base.tcfg, &train, &eval)?;
        push("mode", format!("mode-{}", mode.as_str()), out);
    }

    for name in LOO_CELLS {
        let mut dcfg = base.dcfg.clone();
        match name {
            "no_emb" => dcfg.stage1_terms.emb = false,
            "no_mha" => dcfg.stage1_terms.mha = false,
            "no_ffn" => dcfg.stage1_terms.ffn = false,
            "no_ss" => dcfg.stage2_terms.ss = false,
            "no_sc" => dcfg.stage2_terms.sc = false,
            _ => unreachable!(),
        }
        let out = distill(&teacher, &base.student_config, &dcfg, &base.tcfg, &train, &eval)?;
        push("terms", format!("terms-{}", name), out);
    }

    // Where the two sub-layer losses apply: the default pairing, hidden-state
    // regression at both sub-layers, or attention relations at both sub-layers.
    let positions: [(&str, Stage1Terms); 3] = [
        ("base", base.dcfg.stage1_terms),
        (
            "ffn_both",
            Stage1Terms {
                emb: base.dcfg.stage1_terms.emb,
                mha: false,
                ffn: true,
                mha_on_ffn: false,
                ffn_on_attn: true,
            },
        ),
        (
            "mha_both",
            Stage1Terms {
                emb: base.dcfg.stage1_terms.emb,
                mha: true,
                ffn: false,
                mha_on_ffn: true,
                ffn_on_attn: false,
            },
        ),
    ];
    for (name, terms) in positions {
        let mut dcfg = base.dcfg.clone();
        dcfg.stage1_terms = terms;
        let out = distill(&teacher, &base.student_config, &dcfg, &base.tcfg, &train, &eval)?;
        push("position", format!("position-{}", name), out);
    }

    let out = distill(
        &teacher,
        &base.student_config,
        &base.dcfg,
        &base.tcfg,
        &train,
        &eval,
    )?;
    push("stages", "stages-two".into(), out);
    let out = distill_one_stage(
        &teacher,
        &base.student_config,
        &base.dcfg,
        &base.tcfg,
        &train,
        &eval,
    )?;
    push("stages", "stages-one".into(), out);

    drop(push);
    debug_assert_eq!(cells.len(), expected_cell_count(base));
    Ok(AblationReport { teacher_run, cells })
}
