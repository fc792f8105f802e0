use super::*;
use crate::model::{Batch, Labels, Model, ModelConfig, SampleOutputs, TaskKind};
use crate::numerics::grad_check_params;
use crate::oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-10;

fn mat(t: &Tensor) -> oracle::Mat {
    (0..t.rows()).map(|i| t.row_to_vec(i)).collect()
}

fn randt(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_flat(rows, cols, data).unwrap()
}

fn identity(n: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Rows form an orthonormal basis (modified Gram-Schmidt on a fixed
/// full-rank seed matrix), so Q Qᵀ = I up to rounding.
fn orthogonal(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&q).unwrap()
}

fn model_config(layers: usize, hidden: usize, heads: usize, task: TaskKind) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: hidden,
        intermediate_dim: 2 * hidden,
        num_heads: heads,
        vocab_size: 11,
        max_seq_len: 6,
        num_classes: 3,
        task_kind: task,
    }
}

fn toy_batch(task: TaskKind) -> Batch {
    let token_ids = vec![vec![0, 3, 5, 7], vec![0, 2, 9, 1], vec![0, 8, 4, 4]];
    let attention_mask = vec![
        vec![true, true, true, true],
        vec![true, true, true, false],
        vec![true, true, false, false],
    ];
    let labels = match task {
        TaskKind::Sequence => Labels::PerSequence(vec![0, 1, 0]),
        TaskKind::Token => Labels::PerToken(vec![
            vec![None, None, Some(1), Some(2)],
            vec![None, None, Some(0), None],
            vec![None, None, None, None],
        ]),
    };
    Batch {
        token_ids,
        attention_mask,
        labels,
    }
}

/// Teacher 4 layers / 4 heads / width 8, student 2 layers / 2 heads /
/// width 4, forwarded on the same batch.
fn toy_pair(task: TaskKind) -> (EncoderOutputs, EncoderOutputs, Batch, DistillConfig) {
    let teacher = Model::new(&model_config(4, 8, 4, task), 5).unwrap().freeze();
    let student = Model::new(&model_config(2, 4, 2, task), 6).unwrap();
    let batch = toy_batch(task);
    let t_out = teacher.encoder_forward(&batch).unwrap();
    let s_out = student.encoder_forward(&batch).unwrap();
    let cfg = DistillConfig::new(
        uniform_layer_map(2, 4).unwrap(),
        SplitSpec {
            num_splits: 2,
            mode: SplitMode::Concat,
            rng_seed: 17,
        },
        task,
    );
    (t_out, s_out, batch, cfg)
}

/// One model playing both roles: every loss must vanish.
fn identity_pair() -> (EncoderOutputs, EncoderOutputs, Batch, DistillConfig) {
    let model = Model::new(&model_config(2, 8, 4, TaskKind::Sequence), 9).unwrap();
    let batch = toy_batch(TaskKind::Sequence);
    let t_out = model.encoder_forward(&batch).unwrap();
    let s_out = model.encoder_forward(&batch).unwrap();
    let cfg = DistillConfig::new(
        uniform_layer_map(2, 2).unwrap(),
        SplitSpec {
            num_splits: 4,
            mode: SplitMode::Concat,
            rng_seed: 3,
        },
        TaskKind::Sequence,
    );
    (t_out, s_out, batch, cfg)
}

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

fn hidden_mats(out: &EncoderOutputs, pairs: &[(usize, usize)], teacher_side: bool) -> Vec<Vec<oracle::Mat>> {
    out.samples
        .iter()
        .map(|s| {
            pairs
                .iter()
                .map(|&(n, m)| mat(&s.hidden_states[if teacher_side { m } else { n } - 1]))
                .collect()
        })
        .collect()
}

#[test]
fn uniform_map_examples() {
    assert_eq!(uniform_layer_map(2, 4).unwrap().pairs, vec![(1, 2), (2, 4)]);
    assert_eq!(
        uniform_layer_map(4, 4).unwrap().pairs,
        vec![(1, 1), (2, 2), (3, 3), (4, 4)]
    );
    assert_eq!(
        uniform_layer_map(4, 12).unwrap().pairs,
        vec![(1, 3), (2, 6), (3, 9), (4, 12)]
    );
    assert!(uniform_layer_map(3, 4).is_err());
    assert!(uniform_layer_map(0, 4).is_err());
    assert!(uniform_layer_map(5, 4).is_err());
}

#[test]
fn layer_map_validation_rejects_bad_shapes() {
    let good = uniform_layer_map(2, 4).unwrap();
    assert!(good.validate(2, 4).is_ok());
    assert!(good.validate(3, 4).is_err(), "wrong student depth");
    let short = LayerMap {
        pairs: vec![(1, 2)],
    };
    assert!(short.validate(2, 4).is_err(), "must end at the last layers");
    let backwards = LayerMap {
        pairs: vec![(1, 3), (2, 2)],
    };
    assert!(backwards.validate(2, 4).is_err(), "non-monotone teacher side");
    let zero = LayerMap {
        pairs: vec![(0, 2), (2, 4)],
    };
    assert!(zero.validate(2, 4).is_err(), "layers are numbered from 1");
}

#[test]
fn split_mode_strings_round_trip() {
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        assert_eq!(SplitMode::parse(mode.as_str()).unwrap(), mode);
    }
    assert!(SplitMode::parse("middle").is_err());
}

#[test]
fn concat_split_lays_groups_side_by_side() {
    let heads = vec![
        Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap(),
        Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap(),
        Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap(),
    ];
    let spec = SplitSpec {
        num_splits: 2,
        mode: SplitMode::Concat,
        rng_seed: 0,
    };
    let splits = mha_split(&heads, &spec, 1).unwrap();
    assert_eq!(splits.len(), 2);
    assert_eq!(splits[0].to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(splits[1].to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn singleton_groups_return_the_heads_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let heads: Vec<Tensor> = (0..3).map(|_| randt(&mut rng, 2, 2)).collect();
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        let spec = SplitSpec {
            num_splits: 3,
            mode,
            rng_seed: 11,
        };
        let splits = mha_split(&heads, &spec, 2).unwrap();
        for (s, h) in splits.iter().zip(&heads) {
            assert_eq!(s.to_vec(), h.to_vec());
        }
    }
}

#[test]
fn average_split_of_equal_heads_is_any_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = randt(&mut rng, 3, 2);
    let heads = vec![head.clone(), head.clone(), head.clone(), head.clone()];
    let spec = SplitSpec {
        num_splits: 2,
        mode: SplitMode::Average,
        rng_seed: 0,
    };
    for split in mha_split(&heads, &spec, 1).unwrap() {
        for (a, b) in split.to_vec().iter().zip(head.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn random_split_is_deterministic_and_in_bounds() {
    for seed in [0u64, 7, 123456] {
        for layer in 1..=4 {
            for group in 0..3 {
                let a = random_group_pick(seed, layer, group, 5);
                let b = random_group_pick(seed, layer, group, 5);
                assert_eq!(a, b);
                assert!(a < 5);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let heads: Vec<Tensor> = (0..4).map(|_| randt(&mut rng, 2, 2)).collect();
    let spec = SplitSpec {
        num_splits: 2,
        mode: SplitMode::Random,
        rng_seed: 21,
    };
    let first = mha_split(&heads, &spec, 3).unwrap();
    let second = mha_split(&heads, &spec, 3).unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
    // each split is literally one of its group members
    for (g, split) in first.iter().enumerate() {
        let members = &heads[g * 2..(g + 1) * 2];
        assert!(members.iter().any(|m| m.to_vec() == split.to_vec()));
    }
}

#[test]
fn split_rejects_bad_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let heads: Vec<Tensor> = (0..4).map(|_| randt(&mut rng, 2, 2)).collect();
    for bad in [0usize, 3, 5] {
        let spec = SplitSpec {
            num_splits: bad,
            mode: SplitMode::Concat,
            rng_seed: 0,
        };
        assert!(mha_split(&heads, &spec, 1).is_err(), "count {}", bad);
    }
    assert!(SplitSpec {
        num_splits: 2,
        mode: SplitMode::Concat,
        rng_seed: 0
    }
    .validate(4, 3)
    .is_err());
}

#[test]
fn relation_matrix_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let single = randt(&mut rng, 1, 4);
    let r = relation_matrix(&single, 4, None).unwrap();
    assert_eq!(r.to_vec(), vec![1.0]);

    // X X^T = [[1,0],[0,0]] at scale 1: first row softmax(1, 0).
    let x = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
    let r = relation_matrix(&x, 1, None).unwrap();
    let e = std::f64::consts::E;
    assert!((r.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    assert!((r.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((r.get(1, 0) - 0.5).abs() < 1e-12);

    assert!(relation_matrix(&x, 2, None).is_err(), "scale must match width");
}

#[test]
fn relation_matrix_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randt(&mut rng, 4, 3);
    let q = orthogonal(3);
    let rotated = x.matmul(&q).unwrap();
    let a = relation_matrix(&x, 3, None).unwrap();
    let b = relation_matrix(&rotated, 3, None).unwrap();
    for (u, v) in a.to_vec().iter().zip(b.to_vec()) {
        assert!((u - v).abs() < ORACLE_TOL);
    }
}

#[test]
fn relation_matrix_zeroes_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randt(&mut rng, 3, 2);
    let keep = vec![true, true, false];
    let r = relation_matrix(&x, 2, Some(&keep)).unwrap();
    for i in 0..3 {
        assert_eq!(r.get(i, 2), 0.0);
        let sum: f64 = r.row_to_vec(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn loss_emb_zero_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = randt(&mut rng, 4, 3);
    let masks = vec![vec![true, true, true, false]];
    let loss = loss_emb(&[e.clone()], &[e], 3, 3, &masks).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn loss_emb_matches_oracle() {
    let (t_out, s_out, batch, _) = toy_pair(TaskKind::Sequence);
    let e_t: Vec<Tensor> = t_out.samples.iter().map(|s| s.embedding.clone()).collect();
    let e_s: Vec<Tensor> = s_out.samples.iter().map(|s| s.embedding.clone()).collect();
    let loss = loss_emb(&e_t, &e_s, 8, 4, &batch.attention_mask).unwrap().item();
    let want = oracle::emb_loss(
        &e_t.iter().map(mat).collect::<Vec<_>>(),
        &e_s.iter().map(mat).collect::<Vec<_>>(),
        &batch.attention_mask,
    );
    assert!((loss - want).abs() < ORACLE_TOL, "{} vs {}", loss, want);
}

#[test]
fn loss_emb_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e_t = randt(&mut rng, 4, 3);
    let e_s = e_t.matmul(&orthogonal(3)).unwrap();
    let masks = vec![vec![true; 4]];
    let loss = loss_emb(&[e_t], &[e_s], 3, 3, &masks).unwrap().item();
    assert!(loss.abs() < ORACLE_TOL, "rotation changed the loss: {}", loss);
}

#[test]
fn loss_mha_matches_oracle_in_every_mode() {
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        let (t_out, s_out, batch, mut cfg) = toy_pair(TaskKind::Sequence);
        cfg.split.mode = mode;
        let loss = loss_mha(&t_out, &s_out, &cfg, &batch.attention_mask)
            .unwrap()
            .item();
        let want = oracle::mha_loss(
            &oracle_splits(&t_out, &cfg.layer_map.pairs, &cfg.split, true),
            &oracle_splits(&s_out, &cfg.layer_map.pairs, &cfg.split, false),
            &batch.attention_mask,
        );
        assert!(
            (loss - want).abs() < ORACLE_TOL,
            "{:?}: {} vs {}",
            mode,
            loss,
            want
        );
    }
}

#[test]
fn loss_mha_zero_at_identity() {
    for mode in [SplitMode::Concat, SplitMode::Average, SplitMode::Random] {
        let (t_out, s_out, batch, mut cfg) = identity_pair();
        cfg.split.mode = mode;
        let loss = loss_mha(&t_out, &s_out, &cfg, &batch.attention_mask)
            .unwrap()
            .item();
        assert_eq!(loss, 0.0, "{:?}", mode);
    }
}

fn synthetic_outputs(heads: Vec<Tensor>, hidden: Tensor, pooled_width: usize) -> EncoderOutputs {
    let rows = hidden.rows();
    EncoderOutputs {
        samples: vec![SampleOutputs {
            embedding: Tensor::zeros(rows, pooled_width),
            head_outputs: vec![heads],
            hidden_states: vec![hidden],
        }],
        pooled: Tensor::zeros(1, pooled_width),
        logits: crate::model::Logits::PerSequence(Tensor::zeros(1, 2)),
    }
}

#[test]
fn loss_mha_is_not_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = DistillConfig::new(
        LayerMap {
            pairs: vec![(1, 1)],
        },
        SplitSpec {
            num_splits: 1,
            mode: SplitMode::Concat,
            rng_seed: 0,
        },
        TaskKind::Sequence,
    );
    let t_heads: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 2)).collect();
    let s_heads: Vec<Tensor> = (0..2).map(|_| randt(&mut rng, 3, 2)).collect();
    let masks = vec![vec![true; 3]];
    let base = {
        let t = synthetic_outputs(t_heads.clone(), Tensor::zeros(3, 4), 4);
        let s = synthetic_outputs(s_heads.clone(), Tensor::zeros(3, 4), 4);
        loss_mha(&t, &s, &cfg, &masks).unwrap().item()
    };
    let doubled = {
        let t = synthetic_outputs(t_heads.iter().map(|h| h.scale(2.0)).collect(), Tensor::zeros(3, 4), 4);
        let s = synthetic_outputs(s_heads.iter().map(|h| h.scale(2.0)).collect(), Tensor::zeros(3, 4), 4);
        loss_mha(&t, &s, &cfg, &masks).unwrap().item()
    };
    assert!(
        (base - doubled).abs() > 1e-9,
        "relation logits scale with the representations: {} vs {}",
        base,
        doubled
    );
}

#[test]
fn loss_ffn_zero_with_identity_projection() {
    let (t_out, s_out, batch, cfg) = identity_pair();
    let w_h = identity(8);
    let loss = loss_ffn(&t_out, &s_out, &cfg.layer_map, &w_h, &batch.attention_mask)
        .unwrap()
        .item();
    assert_eq!(loss, 0.0);
}

#[test]
fn loss_ffn_hand_value() {
    let t = synthetic_outputs(vec![], Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), 2);
    let s = synthetic_outputs(vec![], Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 2);
    let map = LayerMap {
        pairs: vec![(1, 1)],
    };
    let loss = loss_ffn(&t, &s, &map, &identity(2), &[vec![true]]).unwrap().item();
    assert!((loss - 0.5).abs() < 1e-12);
}

#[test]
fn loss_ffn_matches_oracle() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w_h = randt(&mut rng, 4, 8);
    let loss = loss_ffn(&t_out, &s_out, &cfg.layer_map, &w_h, &batch.attention_mask)
        .unwrap()
        .item();
    let want = oracle::ffn_loss(
        &hidden_mats(&t_out, &cfg.layer_map.pairs, true),
        &hidden_mats(&s_out, &cfg.layer_map.pairs, false),
        &mat(&w_h),
        &batch.attention_mask,
    );
    assert!((loss - want).abs() < ORACLE_TOL, "{} vs {}", loss, want);
}

#[test]
fn loss_ffn_gradient_passes_finite_difference() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w_h = randt(&mut rng, 4, 8).with_grad();
    let err = grad_check_params(
        || {
            loss_ffn(&t_out, &s_out, &cfg.layer_map, &w_h, &batch.attention_mask)
                .map_err(|_| crate::numerics::TensorError::NoGraph)
        },
        &[w_h.clone()],
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "w_h gradient error {}", err);
}

#[test]
fn swap_site_losses_vanish_at_identity() {
    let (t_out, s_out, batch, cfg) = identity_pair();
    let w_h = identity(8);
    let ffn_at_attn =
        loss_ffn_on_attention(&t_out, &s_out, &cfg.layer_map, &w_h, &batch.attention_mask)
            .unwrap()
            .item();
    assert_eq!(ffn_at_attn, 0.0);
    let mha_at_ffn = loss_mha_on_ffn(&t_out, &s_out, &cfg, &batch.attention_mask)
        .unwrap()
        .item();
    assert_eq!(mha_at_ffn, 0.0);
}

#[test]
fn loss_mha_on_ffn_matches_pseudo_head_oracle() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Sequence);
    let loss = loss_mha_on_ffn(&t_out, &s_out, &cfg, &batch.attention_mask)
        .unwrap()
        .item();
    // slice each hidden state into head-width column groups, then reuse
    // the independent split oracle
    let slice = |m: &oracle::Mat, heads: usize| -> Vec<oracle::Mat> {
        let width = m[0].len() / heads;
        (0..heads)
            .map(|h| {
                m.iter()
                    .map(|row| row[h * width..(h + 1) * width].to_vec())
                    .collect()
            })
            .collect()
    };
    let build = |out: &EncoderOutputs, teacher_side: bool| -> Vec<Vec<Vec<oracle::Mat>>> {
        out.samples
            .iter()
            .map(|s| {
                cfg.layer_map
                    .pairs
                    .iter()
                    .map(|&(n, m)| {
                        let layer = if teacher_side { m } else { n };
                        let heads = s.head_outputs[layer - 1].len();
                        let pseudo = slice(&mat(&s.hidden_states[layer - 1]), heads);
                        oracle::concat_split(&pseudo, cfg.split.num_splits)
                    })
                    .collect()
            })
            .collect()
    };
    let want = oracle::mha_loss(&build(&t_out, true), &build(&s_out, false), &batch.attention_mask);
    assert!((loss - want).abs() < ORACLE_TOL, "{} vs {}", loss, want);
}

#[test]
fn loss_ss_zero_at_identity_and_single_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = randt(&mut rng, 3, 4);
    assert_eq!(loss_ss(&g, &g).unwrap().item(), 0.0);
    let g1 = randt(&mut rng, 1, 4);
    let g2 = randt(&mut rng, 1, 4);
    assert_eq!(loss_ss(&g1, &g2).unwrap().item(), 0.0);
}

#[test]
fn loss_ss_matches_oracle() {
    let g_t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let g_s = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let loss = loss_ss(&g_t, &g_s).unwrap().item();
    let want = oracle::ss_loss(&mat(&g_t), &mat(&g_s));
    assert!((loss - want).abs() < ORACLE_TOL);
    assert!(loss > 0.0);

    let (t_out, s_out, _, _) = toy_pair(TaskKind::Sequence);
    let loss = loss_ss(&t_out.pooled, &s_out.pooled).unwrap().item();
    let want = oracle::ss_loss(&mat(&t_out.pooled), &mat(&s_out.pooled));
    assert!((loss - want).abs() < ORACLE_TOL);
}

#[test]
fn loss_ss_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g_t = randt(&mut rng, 3, 4);
    let g_s = g_t.matmul(&orthogonal(4)).unwrap();
    let loss = loss_ss(&g_t, &g_s).unwrap().item();
    assert!(loss.abs() < ORACLE_TOL, "rotation changed the loss: {}", loss);
}

#[test]
fn loss_sc_zero_for_single_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g_t = randt(&mut rng, 1, 3);
    let g_s = randt(&mut rng, 1, 2);
    let w_g = randt(&mut rng, 2, 3);
    let loss = loss_sc(&g_t, &g_s, &[1], &w_g, 0.07, true).unwrap().item();
    assert!(loss.abs() < 1e-12, "single candidate is its own positive: {}", loss);
}

#[test]
fn loss_sc_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for normalize in [true, false] {
        let g_t = randt(&mut rng, 3, 4);
        let g_s = randt(&mut rng, 3, 2);
        let w_g = randt(&mut rng, 2, 4);
        let labels = [0usize, 1, 0];
        let loss = loss_sc(&g_t, &g_s, &labels, &w_g, 0.07, normalize)
            .unwrap()
            .item();
        let want = oracle::sc_loss(&mat(&g_t), &mat(&g_s), &labels, &mat(&w_g), 0.07, normalize);
        assert!(
            (loss - want).abs() < ORACLE_TOL,
            "normalize={}: {} vs {}",
            normalize,
            loss,
            want
        );
    }
}

#[test]
fn loss_sc_gradients_reach_only_the_student_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g_t = randt(&mut rng, 3, 4).with_grad();
    let g_s = randt(&mut rng, 3, 2).with_grad();
    let w_g = randt(&mut rng, 2, 4).with_grad();
    let labels = [0usize, 1, 1];
    let err = grad_check_params(
        || {
            loss_sc(&g_t, &g_s, &labels, &w_g, 0.07, true)
                .map_err(|_| crate::numerics::TensorError::NoGraph)
        },
        &[w_g.clone(), g_s.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "contrastive gradient error {}", err);

    let loss = loss_sc(&g_t, &g_s, &labels, &w_g, 0.07, true).unwrap();
    loss.backward().unwrap();
    assert!(g_t.grad().is_none(), "teacher side must stay detached");
    assert!(w_g.grad().is_some());
    assert!(g_s.grad().is_some());
}

#[test]
fn loss_kd_hand_value_and_oracle() {
    let z_t = Tensor::from_rows(&[vec![2.0f64.ln(), 0.0]]).unwrap();
    let z_s = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let loss = loss_kd(
        &crate::model::Logits::PerSequence(z_t.clone()),
        &crate::model::Logits::PerSequence(z_s.clone()),
        1.0,
        &[],
    )
    .unwrap()
    .item();
    let want = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert!((loss - want).abs() < 1e-12);
    assert!((loss - 0.056633).abs() < 1e-6);
    let via_oracle = oracle::kd_loss(&mat(&z_t), &mat(&z_s), 1.0);
    assert!((loss - via_oracle).abs() < ORACLE_TOL);

    // softened comparison still matches the oracle at tau != 1
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let z_t = randt(&mut rng, 3, 4);
    let z_s = randt(&mut rng, 3, 4);
    let loss = loss_kd(
        &crate::model::Logits::PerSequence(z_t.clone()),
        &crate::model::Logits::PerSequence(z_s.clone()),
        2.5,
        &[],
    )
    .unwrap()
    .item();
    let want = oracle::kd_loss(&mat(&z_t), &mat(&z_s), 2.5);
    assert!((loss - want).abs() < ORACLE_TOL);
}

#[test]
fn loss_kd_token_averages_over_kept_positions_globally() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let z_t: Vec<Tensor> = (0..3).map(|_| randt(&mut rng, 4, 3)).collect();
    let z_s: Vec<Tensor> = (0..3).map(|_| randt(&mut rng, 4, 3)).collect();
    let masks = vec![
        vec![true, true, true, true],
        vec![true, true, false, false],
        vec![true, false, false, false],
    ];
    let loss = loss_kd(
        &crate::model::Logits::PerToken(z_t.clone()),
        &crate::model::Logits::PerToken(z_s.clone()),
        1.0,
        &masks,
    )
    .unwrap()
    .item();
    let want = oracle::kd_loss_token(
        &z_t.iter().map(mat).collect::<Vec<_>>(),
        &z_s.iter().map(mat).collect::<Vec<_>>(),
        1.0,
        &masks,
    );
    assert!((loss - want).abs() < ORACLE_TOL, "{} vs {}", loss, want);
}

#[test]
fn loss_kd_rejects_bad_inputs() {
    let z = crate::model::Logits::PerSequence(Tensor::zeros(1, 2));
    let zt = crate::model::Logits::PerToken(vec![Tensor::zeros(2, 2)]);
    assert!(loss_kd(&z, &zt, 1.0, &[]).is_err(), "mixed kinds");
    let z2 = crate::model::Logits::PerSequence(Tensor::zeros(1, 2));
    assert!(loss_kd(&z, &z2, 0.0, &[]).is_err(), "tau must be positive");
}

#[test]
fn stage1_total_is_the_sum_of_enabled_terms() {
    let (t_out, s_out, batch, mut cfg) = toy_pair(TaskKind::Sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let w_h = randt(&mut rng, 4, 8);
    cfg.stage1_terms.mha = false;
    let (total, report) = stage1_loss(&t_out, &s_out, &cfg, &w_h, &batch.attention_mask).unwrap();
    assert!(report.mha.is_none());
    let sum = report.emb.unwrap() + report.ffn.unwrap();
    assert!((total.item() - sum).abs() < 1e-9);
    assert!((report.stage1_total.unwrap() - sum).abs() < 1e-9);
}

#[test]
fn stage1_matches_the_term_sum_oracle() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w_h = randt(&mut rng, 4, 8);
    let (total, _) = stage1_loss(&t_out, &s_out, &cfg, &w_h, &batch.attention_mask).unwrap();
    let emb = oracle::emb_loss(
        &t_out.samples.iter().map(|s| mat(&s.embedding)).collect::<Vec<_>>(),
        &s_out.samples.iter().map(|s| mat(&s.embedding)).collect::<Vec<_>>(),
        &batch.attention_mask,
    );
    let mha = oracle::mha_loss(
        &oracle_splits(&t_out, &cfg.layer_map.pairs, &cfg.split, true),
        &oracle_splits(&s_out, &cfg.layer_map.pairs, &cfg.split, false),
        &batch.attention_mask,
    );
    let ffn = oracle::ffn_loss(
        &hidden_mats(&t_out, &cfg.layer_map.pairs, true),
        &hidden_mats(&s_out, &cfg.layer_map.pairs, false),
        &mat(&w_h),
        &batch.attention_mask,
    );
    let want = emb + mha + ffn;
    assert!((total.item() - want).abs() < ORACLE_TOL, "{} vs {}", total.item(), want);
}

#[test]
fn stage1_zero_at_identity() {
    let (t_out, s_out, batch, cfg) = identity_pair();
    let (total, report) = stage1_loss(&t_out, &s_out, &cfg, &identity(8), &batch.attention_mask).unwrap();
    assert_eq!(total.item(), 0.0);
    assert_eq!(report.emb, Some(0.0));
    assert_eq!(report.mha, Some(0.0));
    assert_eq!(report.ffn, Some(0.0));
}

#[test]
fn stage2_token_task_reduces_to_the_prediction_term() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Token);
    assert!(!cfg.stage2_terms.ss && !cfg.stage2_terms.sc);
    let w_g = identity(4);
    let (total, report) =
        stage2_loss(&t_out, &s_out, &batch.labels, &cfg, &w_g, &batch.attention_mask).unwrap();
    assert!(report.ss.is_none() && report.sc.is_none());
    assert_eq!(total.item(), report.kd.unwrap());
}

#[test]
fn stage2_matches_the_term_sum_oracle() {
    let (t_out, s_out, batch, cfg) = toy_pair(TaskKind::Sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w_g = randt(&mut rng, 4, 8);
    let (total, _) =
        stage2_loss(&t_out, &s_out, &batch.labels, &cfg, &w_g, &batch.attention_mask).unwrap();
    let labels = match &batch.labels {
        Labels::PerSequence(l) => l.clone(),
        Labels::PerToken(_) => unreachable!(),
    };
    let z_t = match &t_out.logits {
        crate::model::Logits::PerSequence(z) => mat(z),
        _ => unreachable!(),
    };
    let z_s = match &s_out.logits {
        crate::model::Logits::PerSequence(z) => mat(z),
        _ => unreachable!(),
    };
    let want = oracle::ss_loss(&mat(&t_out.pooled), &mat(&s_out.pooled))
        + oracle::sc_loss(
            &mat(&t_out.pooled),
            &mat(&s_out.pooled),
            &labels,
            &mat(&w_g),
            cfg.rho,
            cfg.normalize_contrastive,
        )
        + oracle::kd_loss(&z_t, &z_s, cfg.tau);
    assert!((total.item() - want).abs() < ORACLE_TOL, "{} vs {}", total.item(), want);
}

#[test]
fn stage2_zero_at_identity_with_identity_projection() {
    let model = Model::new(&model_config(2, 8, 4, TaskKind::Sequence), 23).unwrap();
    let batch = Batch {
        token_ids: vec![vec![0, 3, 5, 7]],
        attention_mask: vec![vec![true; 4]],
        labels: Labels::PerSequence(vec![1]),
    };
    let t_out = model.encoder_forward(&batch).unwrap();
    let s_out = model.encoder_forward(&batch).unwrap();
    let cfg = DistillConfig::new(
        uniform_layer_map(2, 2).unwrap(),
        SplitSpec {
            num_splits: 4,
            mode: SplitMode::Concat,
            rng_seed: 0,
        },
        TaskKind::Sequence,
    );
    let (total, report) =
        stage2_loss(&t_out, &s_out, &batch.labels, &cfg, &identity(8), &batch.attention_mask)
            .unwrap();
    assert_eq!(report.ss, Some(0.0));
    assert_eq!(report.kd, Some(0.0));
    assert!(report.sc.unwrap().abs() < 1e-12, "single-sample contrastive term");
    assert!(total.item().abs() < 1e-12);
}

#[test]
fn teacher_parameters_receive_no_gradient() {
    // deliberately trainable teacher: detachment must hold regardless
    let teacher = Model::new(&model_config(4, 8, 4, TaskKind::Sequence), 24).unwrap();
    let student = Model::new(&model_config(2, 4, 2, TaskKind::Sequence), 25).unwrap();
    let batch = toy_batch(TaskKind::Sequence);
    let t_out = teacher.encoder_forward(&batch).unwrap();
    let s_out = student.encoder_forward(&batch).unwrap();
    let cfg = DistillConfig::new(
        uniform_layer_map(2, 4).unwrap(),
        SplitSpec {
            num_splits: 2,
            mode: SplitMode::Concat,
            rng_seed: 1,
        },
        TaskKind::Sequence,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let w_h = randt(&mut rng, 4, 8).with_grad();
    let (total, _) = stage1_loss(&t_out, &s_out, &cfg, &w_h, &batch.attention_mask).unwrap();
    total.backward().unwrap();
    for (name, p) in teacher.named_parameters() {
        assert!(p.grad().is_none(), "teacher {} picked up a gradient", name);
    }
    for (name, p) in student.named_parameters() {
        if name.starts_with("classifier.") {
            continue; // stage 1 never touches the classification head
        }
        assert!(p.grad().is_some(), "student {} missing a gradient", name);
    }
    assert!(w_h.grad().is_some());

    let t_out = teacher.encoder_forward(&batch).unwrap();
    let s_out = student.encoder_forward(&batch).unwrap();
    let w_g = randt(&mut rng, 4, 8).with_grad();
    let (total, _) =
        stage2_loss(&t_out, &s_out, &batch.labels, &cfg, &w_g, &batch.attention_mask).unwrap();
    total.backward().unwrap();
    for (name, p) in teacher.named_parameters() {
        assert!(p.grad().is_none(), "teacher {} picked up a gradient", name);
    }
    assert!(w_g.grad().is_some());
}

#[test]
fn loss_report_serializes_only_computed_terms() {
    let report = LossReport {
        emb: Some(0.25),
        stage1_total: Some(0.25),
        ..LossReport::default()
    };
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("emb"));
    assert!(!json.contains("mha"));
    assert!(!json.contains("kd"));
    let back: LossReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn config_validation_rules() {
    let mk = || {
        DistillConfig::new(
            uniform_layer_map(2, 4).unwrap(),
            SplitSpec {
                num_splits: 2,
                mode: SplitMode::Concat,
                rng_seed: 0,
            },
            TaskKind::Sequence,
        )
    };
    assert!(mk().validate().is_ok());
    let mut c = mk();
    c.rho = 0.0;
    assert!(c.validate().is_err());
    let mut c = mk();
    c.tau = -1.0;
    assert!(c.validate().is_err());
    let mut c = mk();
    c.task_kind = TaskKind::Token;
    assert!(c.validate().is_err(), "token task with batch-level terms on");
    c.stage2_terms.ss = false;
    c.stage2_terms.sc = false;
    assert!(c.validate().is_ok());

    let teacher = model_config(4, 8, 4, TaskKind::Sequence);
    let student = model_config(2, 4, 2, TaskKind::Sequence);
    assert!(mk().validate_for(&teacher, &student).is_ok());
    let mut c = mk();
    c.split.num_splits = 4; // student only has 2 heads
    assert!(c.validate_for(&teacher, &student).is_err());
    let wrong_task = model_config(2, 4, 2, TaskKind::Token);
    assert!(mk().validate_for(&teacher, &wrong_task).is_err());
    let too_shallow = model_config(3, 4, 2, TaskKind::Sequence);
    assert!(mk().validate_for(&teacher, &too_shallow).is_err());
}

#[test]
fn defaults_follow_the_task_kind() {
    let seq = DistillConfig::new(
        uniform_layer_map(1, 1).unwrap(),
        SplitSpec {
            num_splits: 1,
            mode: SplitMode::Concat,
            rng_seed: 0,
        },
        TaskKind::Sequence,
    );
    assert_eq!(seq.rho, 0.07);
    assert_eq!(seq.tau, 1.0);
    assert!(seq.stage2_terms.ss && seq.stage2_terms.sc && seq.stage2_terms.kd);
    assert!(seq.normalize_contrastive);
    let tok = DistillConfig::new(
        uniform_layer_map(1, 1).unwrap(),
        SplitSpec {
            num_splits: 1,
            mode: SplitMode::Concat,
            rng_seed: 0,
        },
        TaskKind::Token,
    );
    assert!(!tok.stage2_terms.ss && !tok.stage2_terms.sc && tok.stage2_terms.kd);
}
