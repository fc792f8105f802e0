//! Standalone loss verification, run by `kind = "losscheck"`.
//!
//! Two suites: every differentiable loss against its brute-force oracle on
//! randomized toy instances, and central-finite-difference checks of every
//! loss gradient plus both stage composites evaluated through a real
//! 2-layer model. Each check reports its worst observed deviation so a
//! failure shows how far off it was, not just that it was.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    loss_emb, loss_ffn, loss_ffn_on_attention, loss_kd, loss_mha, loss_mha_on_ffn, loss_sc,
    loss_ss, random_group_pick, stage1_loss, stage2_loss, uniform_layer_map, DistillConfig,
    LayerMap, SplitMode, SplitSpec,
};
use crate::model::{
    Batch, EncoderOutputs, Labels, Logits, Model, ModelConfig, SampleOutputs, TaskKind,
};
use crate::numerics::{grad_check_params, Tensor, TensorError};
use crate::oracle;

/// Allowed |loss - oracle| per instance.
pub const ORACLE_TOL: f64 = 1e-10;
/// Allowed relative error for single-term gradients.
pub const TERM_GRAD_TOL: f64 = 1e-4;
/// Allowed relative error for the stage composites through a model.
pub const STAGE_GRAD_TOL: f64 = 1e-3;
/// Random instances per oracle check.
pub const ORACLE_INSTANCES: usize = 100;

const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn report(name: &str, tol: f64, outcome: Result<f64, String>, what: &str) -> CheckReport {
    match outcome {
        Ok(v) => CheckReport {
            name: name.to_string(),
            passed: v.is_finite() && v <= tol,
            detail: format!("{what} {v:.2e}, tolerance {tol:.0e}"),
        },
        Err(e) => CheckReport {
            name: name.to_string(),
            passed: false,
            detail: e,
        },
    }
}

/// Runs every check. Deterministic in the seed; the caller decides how to
/// render the reports and whether failures are fatal.
pub fn run_losscheck(seed: u64) -> Vec<CheckReport> {
    let mut checks = Vec::new();

    let oracle_what = format!("max deviation over {ORACLE_INSTANCES} instances");
    match oracle_suite(seed) {
        Ok(d) => {
            checks.push(report("oracle emb", ORACLE_TOL, Ok(d.emb), &oracle_what));
            checks.push(report("oracle mha", ORACLE_TOL, Ok(d.mha), &oracle_what));
            checks.push(report("oracle ffn", ORACLE_TOL, Ok(d.ffn), &oracle_what));
            checks.push(report("oracle ss", ORACLE_TOL, Ok(d.ss), &oracle_what));
            checks.push(report("oracle sc", ORACLE_TOL, Ok(d.sc), &oracle_what));
            checks.push(report("oracle kd sequence", ORACLE_TOL, Ok(d.kd_seq), &oracle_what));
            checks.push(report("oracle kd token", ORACLE_TOL, Ok(d.kd_tok), &oracle_what));
        }
        Err(e) => {
            for name in [
                "oracle emb",
                "oracle mha",
                "oracle ffn",
                "oracle ss",
                "oracle sc",
                "oracle kd sequence",
                "oracle kd token",
            ] {
                checks.push(report(name, ORACLE_TOL, Err(e.clone()), &oracle_what));
            }
        }
    }

    let grads: [(&str, fn(u64) -> Result<f64, String>); 9] = [
        ("grad emb", grad_emb),
        ("grad mha", grad_mha),
        ("grad ffn", grad_ffn),
        ("grad ffn-on-attention", grad_ffn_on_attn),
        ("grad mha-on-ffn", grad_mha_on_ffn),
        ("grad ss", grad_ss),
        ("grad sc", grad_sc),
        ("grad kd sequence", grad_kd_sequence),
        ("grad kd token", grad_kd_token),
    ];
    for (name, f) in grads {
        checks.push(report(name, TERM_GRAD_TOL, f(seed), "max relative error"));
    }

    match stage_grads(seed) {
        Ok((s1, s2)) => {
            checks.push(report(
                "grad stage1 composite",
                STAGE_GRAD_TOL,
                Ok(s1),
                "max relative error",
            ));
            checks.push(report(
                "grad stage2 composite",
                STAGE_GRAD_TOL,
                Ok(s2),
                "max relative error",
            ));
        }
        Err(e) => {
            checks.push(report("grad stage1 composite", STAGE_GRAD_TOL, Err(e.clone()), ""));
            checks.push(report("grad stage2 composite", STAGE_GRAD_TOL, Err(e), ""));
        }
    }

    checks
}

// ---------------------------------------------------------------------
// Oracle equivalence on random instances
// ---------------------------------------------------------------------

fn mat(t: &Tensor) -> oracle::Mat {
    (0..t.rows()).map(|i| t.row_to_vec(i)).collect()
}

fn randt(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_flat(rows, cols, data).expect("shape matches data")
}

struct Instance {
    t_out: EncoderOutputs,
    s_out: EncoderOutputs,
    batch: Batch,
    cfg: DistillConfig,
    d_t: usize,
    d_s: usize,
}

/// One random teacher/student pair forwarded on a random batch. Dims stay
/// tiny (batch <= 4, length <= 5, widths <= 8) so the naive oracles are
/// instant; head counts and split counts are drawn compatibly.
fn random_instance(rng: &mut ChaCha8Rng, kind: TaskKind, index: usize) -> Result<Instance, String> {
    let student_layers = rng.gen_range(1..=2);
    let teacher_layers = student_layers * rng.gen_range(1..=2usize);
    let d_t = if rng.gen_bool(0.5) { 8 } else { 4 };
    let t_heads = if rng.gen_bool(0.5) { 4 } else { 2 };
    let d_s = if rng.gen_bool(0.5) { 4 } else { 2 };
    let s_heads = if d_s == 4 && rng.gen_bool(0.5) { 4 } else { 2 };
    let common: Vec<usize> = [1, 2, 4]
        .into_iter()
        .filter(|k| t_heads % k == 0 && s_heads % k == 0)
        .collect();
    let splits = common[rng.gen_range(0..common.len())];

    let vocab = 9;
    let classes = 3;
    let len = rng.gen_range(2..=5);
    let b = rng.gen_range(1..=4);

    let mut token_ids = Vec::with_capacity(b);
    let mut attention_mask = Vec::with_capacity(b);
    for _ in 0..b {
        let mut ids = vec![0usize; len];
        for slot in ids.iter_mut().skip(1) {
            *slot = rng.gen_range(1..vocab);
        }
        let kept = rng.gen_range(1..len);
        token_ids.push(ids);
        attention_mask.push((0..len).map(|j| j <= kept).collect::<Vec<bool>>());
    }
    let labels = match kind {
        TaskKind::Sequence => {
            Labels::PerSequence((0..b).map(|_| rng.gen_range(0..classes)).collect())
        }
        TaskKind::Token => Labels::PerToken(
            attention_mask
                .iter()
                .map(|m| {
                    m.iter()
                        .enumerate()
                        .map(|(j, &keep)| (keep && j >= 1).then(|| rng.gen_range(0..classes)))
                        .collect()
                })
                .collect(),
        ),
    };
    let batch = Batch {
        token_ids,
        attention_mask,
        labels,
    };

    let model_cfg = |layers: usize, hidden: usize, heads: usize| ModelConfig {
        num_layers: layers,
        hidden_dim: hidden,
        intermediate_dim: 2 * hidden,
        num_heads: heads,
        vocab_size: vocab,
        max_seq_len: 5,
        num_classes: classes,
        task_kind: kind,
    };
    let teacher = Model::new(&model_cfg(teacher_layers, d_t, t_heads), rng.gen())
        .map_err(|e| e.to_string())?
        .freeze();
    let student =
        Model::new(&model_cfg(student_layers, d_s, s_heads), rng.gen()).map_err(|e| e.to_string())?;
    let t_out = teacher.encoder_forward(&batch).map_err(|e| e.to_string())?;
    let s_out = student.encoder_forward(&batch).map_err(|e| e.to_string())?;

    let layer_map =
        uniform_layer_map(student_layers, teacher_layers).map_err(|e| e.to_string())?;
    let mut cfg = DistillConfig::new(
        layer_map,
        SplitSpec {
            num_splits: splits,
            mode: [SplitMode::Concat, SplitMode::Average, SplitMode::Random][index % 3],
            rng_seed: rng.gen(),
        },
        kind,
    );
    cfg.rho = [0.07, 0.3][index % 2];
    cfg.tau = [1.0, 2.0][index % 2];
    cfg.normalize_contrastive = index % 2 == 0;

    Ok(Instance {
        t_out,
        s_out,
        batch,
        cfg,
        d_t,
        d_s,
    })
}

/// Rebuilds the split inputs the loss saw, through the oracle split
/// helpers. Layout: `[sample][mapped pair][split]`.
fn oracle_splits(
    out: &EncoderOutputs,
    pairs: &[(usize, usize)],
    spec: &SplitSpec,
    teacher_side: bool,
) -> Vec<Vec<Vec<oracle::Mat>>> {
    out.samples
        .iter()
        .map(|s| {
            pairs
                .iter()
                .map(|&(n, m)| {
                    let layer = if teacher_side { m } else { n };
                    let heads: Vec<oracle::Mat> =
                        s.head_outputs[layer - 1].iter().map(mat).collect();
                    match spec.mode {
                        SplitMode::Concat => oracle::concat_split(&heads, spec.num_splits),
                        SplitMode::Average => oracle::average_split(&heads, spec.num_splits),
                        SplitMode::Random => {
                            let group = heads.len() / spec.num_splits;
                            let picks: Vec<usize> = (0..spec.num_splits)
                                .map(|g| random_group_pick(spec.rng_seed, layer, g, group))
                                .collect();
                            oracle::pick_split(&heads, spec.num_splits, &picks)
                        }
                    }
                })
                .collect()
        })
        .collect()
}

fn hidden_mats(
    out: &EncoderOutputs,
    pairs: &[(usize, usize)],
    teacher_side: bool,
) -> Vec<Vec<oracle::Mat>> {
    out.samples
        .iter()
        .map(|s| {
            pairs
                .iter()
                .map(|&(n, m)| mat(&s.hidden_states[(if teacher_side { m } else { n }) - 1]))
                .collect()
        })
        .collect()
}

#[derive(Default)]
struct OracleDevs {
    emb: f64,
    mha: f64,
    ffn: f64,
    ss: f64,
    sc: f64,
    kd_seq: f64,
    kd_tok: f64,
}

fn oracle_suite(seed: u64) -> Result<OracleDevs, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut devs = OracleDevs::default();
    let err = |e: crate::distill::DistillError| e.to_string();

    for index in 0..ORACLE_INSTANCES {
        let inst = random_instance(&mut rng, TaskKind::Sequence, index)?;
        let masks = &inst.batch.attention_mask;
        let pairs = &inst.cfg.layer_map.pairs;

        let e_t: Vec<Tensor> = inst.t_out.samples.iter().map(|s| s.embedding.clone()).collect();
        let e_s: Vec<Tensor> = inst.s_out.samples.iter().map(|s| s.embedding.clone()).collect();
        let got = loss_emb(&e_t, &e_s, inst.d_t, inst.d_s, masks).map_err(err)?.item();
        let e_t_m: Vec<oracle::Mat> = e_t.iter().map(mat).collect();
        let e_s_m: Vec<oracle::Mat> = e_s.iter().map(mat).collect();
        devs.emb = devs.emb.max((got - oracle::emb_loss(&e_t_m, &e_s_m, masks)).abs());

        let got = loss_mha(&inst.t_out, &inst.s_out, &inst.cfg, masks).map_err(err)?.item();
        let want = oracle::mha_loss(
            &oracle_splits(&inst.t_out, pairs, &inst.cfg.split, true),
            &oracle_splits(&inst.s_out, pairs, &inst.cfg.split, false),
            masks,
        );
        devs.mha = devs.mha.max((got - want).abs());

        let w_h = randt(&mut rng, inst.d_s, inst.d_t);
        let got = loss_ffn(&inst.t_out, &inst.s_out, &inst.cfg.layer_map, &w_h, masks)
            .map_err(err)?
            .item();
        let want = oracle::ffn_loss(
            &hidden_mats(&inst.t_out, pairs, true),
            &hidden_mats(&inst.s_out, pairs, false),
            &mat(&w_h),
            masks,
        );
        devs.ffn = devs.ffn.max((got - want).abs());

        let got = loss_ss(&inst.t_out.pooled, &inst.s_out.pooled).map_err(err)?.item();
        let want = oracle::ss_loss(&mat(&inst.t_out.pooled), &mat(&inst.s_out.pooled));
        devs.ss = devs.ss.max((got - want).abs());

        let Labels::PerSequence(labels) = &inst.batch.labels else {
            return Err("sequence instance carries per-token labels".into());
        };
        let w_g = randt(&mut rng, inst.d_s, inst.d_t);
        let got = loss_sc(
            &inst.t_out.pooled,
            &inst.s_out.pooled,
            labels,
            &w_g,
            inst.cfg.rho,
            inst.cfg.normalize_contrastive,
        )
        .map_err(err)?
        .item();
        let want = oracle::sc_loss(
            &mat(&inst.t_out.pooled),
            &mat(&inst.s_out.pooled),
            labels,
            &mat(&w_g),
            inst.cfg.rho,
            inst.cfg.normalize_contrastive,
        );
        devs.sc = devs.sc.max((got - want).abs());

        let got = loss_kd(&inst.t_out.logits, &inst.s_out.logits, inst.cfg.tau, masks)
            .map_err(err)?
            .item();
        let (Logits::PerSequence(z_t), Logits::PerSequence(z_s)) =
            (&inst.t_out.logits, &inst.s_out.logits)
        else {
            return Err("sequence instance produced per-token logits".into());
        };
        devs.kd_seq = devs
            .kd_seq
            .max((got - oracle::kd_loss(&mat(z_t), &mat(z_s), inst.cfg.tau)).abs());
    }

    for index in 0..ORACLE_INSTANCES {
        let inst = random_instance(&mut rng, TaskKind::Token, index)?;
        let masks = &inst.batch.attention_mask;
        let got = loss_kd(&inst.t_out.logits, &inst.s_out.logits, inst.cfg.tau, masks)
            .map_err(err)?
            .item();
        let (Logits::PerToken(z_t), Logits::PerToken(z_s)) =
            (&inst.t_out.logits, &inst.s_out.logits)
        else {
            return Err("token instance produced sequence logits".into());
        };
        let z_t_m: Vec<oracle::Mat> = z_t.iter().map(mat).collect();
        let z_s_m: Vec<oracle::Mat> = z_s.iter().map(mat).collect();
        devs.kd_tok = devs
            .kd_tok
            .max((got - oracle::kd_loss_token(&z_t_m, &z_s_m, inst.cfg.tau, masks)).abs());
    }

    Ok(devs)
}

// ---------------------------------------------------------------------
// Finite-difference checks
// ---------------------------------------------------------------------

fn to_num<E>(_e: E) -> TensorError {
    TensorError::NoGraph
}

fn check_err(e: TensorError) -> String {
    e.to_string()
}

/// Single-sample container for losses that read encoder internals; the
/// parts a given loss ignores are zeros of a consistent shape.
fn leaf_outputs(head_layers: Vec<Vec<Tensor>>, hidden_layers: Vec<Tensor>) -> EncoderOutputs {
    let width = hidden_layers.last().map(Tensor::cols).unwrap_or(2);
    let rows = hidden_layers.last().map(Tensor::rows).unwrap_or(3);
    EncoderOutputs {
        samples: vec![SampleOutputs {
            embedding: Tensor::zeros(rows, width),
            head_outputs: head_layers,
            hidden_states: hidden_layers,
        }],
        pooled: Tensor::zeros(1, width),
        logits: Logits::PerSequence(Tensor::zeros(1, 2)),
    }
}

fn unit_cfg(mode: SplitMode, splits: usize) -> DistillConfig {
    DistillConfig::new(
        LayerMap {
            pairs: vec![(1, 1)],
        },
        SplitSpec {
            num_splits: splits,
            mode,
            rng_seed: 5,
        },
        TaskKind::Sequence,
    )
}

fn grad_emb(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1);
    let masks = vec![vec![true, true, true], vec![true, true, false]];
    let e_t: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 4)).collect();
    let e_s: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 4).with_grad()).collect();
    grad_check_params(
        || loss_emb(&e_t, &e_s, 4, 4, &masks).map_err(to_num),
        &e_s,
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_mha(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa2);
    let masks = vec![vec![true, true, true]];
    let t_heads: Vec<Tensor> = (0..4).map(|_| randt(&mut rng, 3, 2)).collect();
    let s_heads: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 2).with_grad()).collect();
    let t_out = leaf_outputs(vec![t_heads], vec![Tensor::zeros(3, 8)]);
    let s_out = leaf_outputs(vec![s_heads.clone()], vec![Tensor::zeros(3, 4)]);
    let mut worst: f64 = 0.0;
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        let cfg = unit_cfg(mode, 2);
        let err = grad_check_params(
            || loss_mha(&t_out, &s_out, &cfg, &masks).map_err(to_num),
            &s_heads,
            GRAD_STEP,
        )
        .map_err(check_err)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn grad_ffn(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf3);
    let masks = vec![vec![true, true, false]];
    let t_out = leaf_outputs(vec![], vec![randt(&mut rng, 3, 8)]);
    let s_hidden = randt(&mut rng, 3, 4).with_grad();
    let s_out = leaf_outputs(vec![], vec![s_hidden.clone()]);
    let w_h = randt(&mut rng, 4, 8).with_grad();
    let map = LayerMap {
        pairs: vec![(1, 1)],
    };
    grad_check_params(
        || loss_ffn(&t_out, &s_out, &map, &w_h, &masks).map_err(to_num),
        &[s_hidden.clone(), w_h.clone()],
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_ffn_on_attn(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf4);
    let masks = vec![vec![true, true, true]];
    let t_heads: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 2)).collect();
    let s_heads: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 2).with_grad()).collect();
    let t_out = leaf_outputs(vec![t_heads], vec![Tensor::zeros(3, 4)]);
    let s_out = leaf_outputs(vec![s_heads.clone()], vec![Tensor::zeros(3, 4)]);
    let w_h = randt(&mut rng, 4, 4).with_grad();
    let map = LayerMap {
        pairs: vec![(1, 1)],
    };
    let mut params = s_heads;
    params.push(w_h.clone());
    grad_check_params(
        || loss_ffn_on_attention(&t_out, &s_out, &map, &w_h, &masks).map_err(to_num),
        &params,
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_mha_on_ffn(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    let masks = vec![vec![true, true, true]];
    let t_dummy: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(3, 2)).collect();
    let s_dummy: Vec<Tensor> = (0..2).map(|_| Tensor::zeros(3, 2)).collect();
    let t_out = leaf_outputs(vec![t_dummy], vec![randt(&mut rng, 3, 8)]);
    let s_hidden = randt(&mut rng, 3, 4).with_grad();
    let s_out = leaf_outputs(vec![s_dummy], vec![s_hidden.clone()]);
    let mut worst: f64 = 0.0;
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        let cfg = unit_cfg(mode, 2);
        let err = grad_check_params(
            || loss_mha_on_ffn(&t_out, &s_out, &cfg, &masks).map_err(to_num),
            &[s_hidden.clone()],
            GRAD_STEP,
        )
        .map_err(check_err)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn grad_ss(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x56);
    let g_t = randt(&mut rng, 3, 4);
    let g_s = randt(&mut rng, 3, 2).with_grad();
    grad_check_params(
        || loss_ss(&g_t, &g_s).map_err(to_num),
        &[g_s.clone()],
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_sc(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c);
    let g_t = randt(&mut rng, 3, 4);
    let g_s = randt(&mut rng, 3, 2).with_grad();
    let w_g = randt(&mut rng, 2, 4).with_grad();
    let labels = [0usize, 1, 0];
    grad_check_params(
        || loss_sc(&g_t, &g_s, &labels, &w_g, 0.07, true).map_err(to_num),
        &[g_s.clone(), w_g.clone()],
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_kd_sequence(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let z_t = Logits::PerSequence(randt(&mut rng, 3, 3));
    let z_s_leaf = randt(&mut rng, 3, 3).with_grad();
    let z_s = Logits::PerSequence(z_s_leaf.clone());
    grad_check_params(
        || loss_kd(&z_t, &z_s, 2.0, &[]).map_err(to_num),
        &[z_s_leaf.clone()],
        GRAD_STEP,
    )
    .map_err(check_err)
}

fn grad_kd_token(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd2);
    let masks = vec![vec![true, true], vec![true, false]];
    let z_t = Logits::PerToken((0..2).map(|_| randt(&mut rng, 2, 3)).collect());
    let leaves: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 2, 3).with_grad()).collect();
    let z_s = Logits::PerToken(leaves.clone());
    grad_check_params(
        || loss_kd(&z_t, &z_s, 1.5, &masks).map_err(to_num),
        &leaves,
        GRAD_STEP,
    )
    .map_err(check_err)
}

/// End-to-end composites: gradients of the stage-1 and stage-2 totals with
/// respect to every trainable student parameter plus the stage's learned
/// projection, with the forward pass re-run inside the probe.
fn stage_grads(seed: u64) -> Result<(f64, f64), String> {
    let config = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        intermediate_dim: 16,
        num_heads: 2,
        vocab_size: 9,
        max_seq_len: 4,
        num_classes: 3,
        task_kind: TaskKind::Sequence,
    };
    let teacher = Model::new(&config, seed ^ 0x1ead).map_err(|e| e.to_string())?.freeze();
    let student = Model::new(&config, seed ^ 0x2bad).map_err(|e| e.to_string())?;
    let batch = Batch {
        token_ids: vec![vec![0, 3, 5, 7], vec![0, 2, 8, 1]],
        attention_mask: vec![vec![true, true, true, true], vec![true, true, true, false]],
        labels: Labels::PerSequence(vec![0, 1]),
    };
    let cfg = DistillConfig::new(
        uniform_layer_map(2, 2).map_err(|e| e.to_string())?,
        SplitSpec {
            num_splits: 2,
            mode: SplitMode::Concat,
            rng_seed: 11,
        },
        TaskKind::Sequence,
    );
    let t_out = teacher.encoder_forward(&batch).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c);
    let w_h = randt(&mut rng, 8, 8).with_grad();
    let w_g = randt(&mut rng, 8, 8).with_grad();

    let mut stage1_params = student.encoder_parameters();
    stage1_params.push(w_h.clone());
    let err1 = grad_check_params(
        || {
            let s_out = student.encoder_forward(&batch).map_err(to_num)?;
            stage1_loss(&t_out, &s_out, &cfg, &w_h, &batch.attention_mask)
                .map(|(total, _)| total)
                .map_err(to_num)
        },
        &stage1_params,
        GRAD_STEP,
    )
    .map_err(check_err)?;

    let mut stage2_params = student.parameters();
    stage2_params.push(w_g.clone());
    let err2 = grad_check_params(
        || {
            let s_out = student.encoder_forward(&batch).map_err(to_num)?;
            stage2_loss(&t_out, &s_out, &batch.labels, &cfg, &w_g, &batch.attention_mask)
                .map(|(total, _)| total)
                .map_err(to_num)
        },
        &stage2_params,
        GRAD_STEP,
    )
    .map_err(check_err)?;

    Ok((err1, err2))
}
