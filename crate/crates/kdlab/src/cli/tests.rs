use std::fs;
use std::path::Path;

use super::config::{apply_file, apply_set, resolve, to_resolved_toml, ExperimentConfig, RunKind};
use super::runner::{emit_plot_data, run};
use super::Args;
use crate::distill::LossReport;
use crate::model::load_model;
use crate::pipeline::MetricRecord;
use tempfile::tempdir;

fn set_args(assignments: &[&str]) -> Args {
    Args {
        set: assignments.iter().map(|s| s.to_string()).collect(),
        ..Args::default()
    }
}

/// Args for a run small enough that any kind finishes in well under a second.
fn tiny_args(out: &Path, kind: &str, seed: u64, extra: &[&str]) -> Args {
    let mut args = set_args(&[
        "task.vocab_size=12",
        "task.seq_len=6",
        "task.num_classes=2",
        "task.num_train=24",
        "task.num_eval=12",
        "task.noise_rate=0.0",
        "teacher.num_layers=2",
        "teacher.hidden_dim=8",
        "teacher.intermediate_dim=16",
        "teacher.num_heads=2",
        "student.num_layers=1",
        "student.hidden_dim=4",
        "student.intermediate_dim=8",
        "student.num_heads=2",
        "distill.splits=2",
        "train.teacher_epochs=1",
        "train.stage1_epochs=1",
        "train.stage2_epochs=1",
        "train.batch_size=8",
        "bench.reps=1",
        "bench.warmup=0",
    ]);
    args.set.extend(extra.iter().map(|s| s.to_string()));
    args.out = Some(out.to_path_buf());
    args.seed = Some(seed);
    args.kind = Some(kind.to_string());
    args
}

#[test]
fn defaults_resolve_without_a_config_file() {
    let cfg = resolve(&Args::default()).unwrap();
    assert_eq!(cfg.kind, RunKind::Distill);
    assert_eq!(cfg.distill.rho, crate::distill::DEFAULT_RHO);
    assert_eq!(cfg.distill.tau, crate::distill::DEFAULT_TAU);
    assert_eq!(cfg.teacher.num_layers, 4);
    assert_eq!(cfg.student.num_layers, 2);

    // The model configs inherit the task geometry rather than carrying their own.
    let teacher = cfg.teacher_config();
    assert_eq!(teacher.vocab_size, cfg.task.vocab_size);
    assert_eq!(teacher.max_seq_len, cfg.task.seq_len);
    assert_eq!(teacher.num_classes, cfg.task.num_classes);

    let distill = cfg.distill_config().unwrap();
    assert_eq!(distill.layer_map.pairs, vec![(1, 2), (2, 4)]);
}

#[test]
fn run_kind_strings_round_trip() {
    let kinds = [
        RunKind::TrainTeacher,
        RunKind::Distill,
        RunKind::DistillOneStage,
        RunKind::Ablate,
        RunKind::Benchmark,
        RunKind::Losscheck,
    ];
    for kind in kinds {
        assert_eq!(RunKind::parse(kind.as_str()).unwrap(), kind);
    }
    let err = RunKind::parse("train_teacher").unwrap_err().to_string();
    assert!(err.contains("train-teacher"), "unhelpful error: {err}");
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let mut cfg = ExperimentConfig::default();
    let err = apply_file(&mut cfg, "[task]\nvocab = 12\n").unwrap_err().to_string();
    assert!(err.contains("task.vocab"), "missing key name: {err}");

    let err = apply_file(&mut cfg, "speed = 3\n").unwrap_err().to_string();
    assert!(err.contains("speed"), "missing key name: {err}");

    let err = apply_set(&mut cfg, "distill.rho2=0.1").unwrap_err().to_string();
    assert!(err.contains("distill.rho2"), "missing key name: {err}");
}

#[test]
fn malformed_values_are_rejected_with_context() {
    let mut cfg = ExperimentConfig::default();
    let err = apply_set(&mut cfg, "train.batch_size=soon").unwrap_err().to_string();
    assert!(err.contains("train.batch_size"), "missing key name: {err}");

    let err = apply_set(&mut cfg, "train.batch_size").unwrap_err().to_string();
    assert!(err.contains("KEY=VALUE"), "missing usage hint: {err}");

    // A section name used as a scalar gets a pointer at the dotted form.
    let err = apply_file(&mut cfg, "task = 3\n").unwrap_err().to_string();
    assert!(err.contains("task.x"), "missing dotted hint: {err}");

    // Nested tables are out: the schema is exactly two levels.
    let err = apply_file(&mut cfg, "[task.inner]\nx = 1\n").unwrap_err().to_string();
    assert!(err.contains("task.inner"), "missing path: {err}");
}

#[test]
fn overrides_apply_in_precedence_order() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "kind = \"ablate\"\n[train]\nlearning_rate = 0.01\nseed = 3\n").unwrap();

    let mut args = set_args(&["train.learning_rate=0.02", "train.learning_rate=0.03"]);
    args.config = Some(file);
    args.seed = Some(9);
    args.kind = Some("benchmark".to_string());

    let cfg = resolve(&args).unwrap();
    // Later --set assignments win over earlier ones and over the file.
    assert_eq!(cfg.train.learning_rate, 0.03);
    // The dedicated flags win over everything.
    assert_eq!(cfg.kind, RunKind::Benchmark);
    // --seed pins the task and training seeds together.
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.task.seed, 9);
}

#[test]
fn set_values_take_their_natural_types() {
    let mut cfg = ExperimentConfig::default();
    apply_set(&mut cfg, "distill.rho=0.5").unwrap();
    apply_set(&mut cfg, "distill.split_mode=average").unwrap();
    apply_set(&mut cfg, "distill.use_emb=false").unwrap();
    apply_set(&mut cfg, "train.grad_clip=2.5").unwrap();
    assert_eq!(cfg.distill.rho, 0.5);
    assert_eq!(cfg.distill.split_mode, crate::distill::SplitMode::Average);
    assert!(!cfg.distill.use_emb);
    assert_eq!(cfg.train.grad_clip, Some(2.5));

    // Zero is the sentinel for "no clipping": Option has no TOML spelling.
    apply_set(&mut cfg, "train.grad_clip=0").unwrap();
    assert_eq!(cfg.train.grad_clip, None);

    // An integer literal still lands in a float field.
    apply_set(&mut cfg, "distill.tau=2").unwrap();
    assert_eq!(cfg.distill.tau, 2.0);
}

#[test]
fn resolved_config_round_trips_through_the_parser() {
    let mut cfg = ExperimentConfig::default();
    cfg.kind = RunKind::Ablate;
    cfg.out_dir = "elsewhere".to_string();
    cfg.task.noise_rate = 0.4;
    cfg.task.kind = crate::model::TaskKind::Token;
    cfg.distill.splits = 6;
    cfg.distill.use_sc = false;
    cfg.train.grad_clip = Some(1.5);
    cfg.train.optimizer = crate::optim::OptimizerKind::Sgd;

    let text = to_resolved_toml(&cfg);
    let mut reparsed = ExperimentConfig::default();
    apply_file(&mut reparsed, &text).unwrap();
    assert_eq!(reparsed, cfg);

    // The emitted text mentions every key it accepts, so the round trip
    // holds from any starting point, not just the defaults.
    let default_text = to_resolved_toml(&ExperimentConfig::default());
    apply_file(&mut reparsed, &default_text).unwrap();
    assert_eq!(reparsed, ExperimentConfig::default());
}

#[test]
fn infeasible_split_counts_fail_validation() {
    let args = set_args(&["student.num_heads=4", "distill.splits=3"]);
    let err = resolve(&args).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('3'), "missing values: {err}");
    assert!(err.contains("not divisible"), "missing cause: {err}");
}

#[test]
fn experiment_id_ignores_the_output_root() {
    let mut a = ExperimentConfig::default();
    let mut b = ExperimentConfig::default();
    a.out_dir = "runs".to_string();
    b.out_dir = "/tmp/elsewhere".to_string();
    assert_eq!(a.experiment_id(), b.experiment_id());
    assert!(a.experiment_id().starts_with("distill-"));
    assert!(a.experiment_id().ends_with("-s1"));

    b.train.seed = 2;
    assert_ne!(a.experiment_id(), b.experiment_id());
}

#[test]
fn train_teacher_run_writes_the_full_artifact_set() {
    let out = tempdir().unwrap();
    let cfg = resolve(&tiny_args(out.path(), "train-teacher", 3, &[])).unwrap();
    let dir = run(&cfg).unwrap();

    let resolved = fs::read_to_string(dir.join("resolved-config.toml")).unwrap();
    assert_eq!(resolved, to_resolved_toml(&cfg));

    let teacher = load_model(&dir.join("teacher.ckpt")).unwrap();
    assert_eq!(teacher.config.num_layers, 2);

    let metrics = fs::read_to_string(dir.join("metrics.ndjson")).unwrap();
    let records: Vec<MetricRecord> = metrics
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.stage == "teacher"));

    let summary = fs::read_to_string(dir.join("summary.tsv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one teacher row:\n{summary}");
    assert!(lines[0].starts_with("name\trole\tparams\t"));
    assert!(lines[1].starts_with("teacher\tteacher\t"));

    assert!(dir.join("plots/loss_train_loss.tsv").exists());
    assert!(dir.join("plots/accuracy.tsv").exists());
}

#[test]
fn distill_runs_are_identical_apart_from_wall_clock() {
    let out_a = tempdir().unwrap();
    let out_b = tempdir().unwrap();
    let dir_a = run(&resolve(&tiny_args(out_a.path(), "distill", 5, &[])).unwrap()).unwrap();
    let dir_b = run(&resolve(&tiny_args(out_b.path(), "distill", 5, &[])).unwrap()).unwrap();

    // Same experiment id under either root.
    assert_eq!(dir_a.file_name(), dir_b.file_name());

    for ckpt in ["teacher.ckpt", "student.ckpt"] {
        let a = fs::read(dir_a.join(ckpt)).unwrap();
        let b = fs::read(dir_b.join(ckpt)).unwrap();
        assert_eq!(a, b, "{ckpt} differs between reruns");
    }

    let strip_wall = |path: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v["wall_ms"] = 0.0.into();
                v
            })
            .collect()
    };
    assert_eq!(
        strip_wall(&dir_a.join("metrics.ndjson")),
        strip_wall(&dir_b.join("metrics.ndjson"))
    );

    // Column 4 (speed_ratio) is measured; everything else must match bytewise.
    let strip_speed = |path: &Path| -> String {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split('\t').collect();
                cols[4] = "";
                cols.join("\t")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip_speed(&dir_a.join("summary.tsv")),
        strip_speed(&dir_b.join("summary.tsv"))
    );

    let summary = fs::read_to_string(dir_a.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "teacher and student rows:\n{summary}");
}

#[test]
fn ablate_run_writes_one_summary_row_per_cell() {
    // The head sweep is fixed, so the base needs 12-head models.
    let out = tempdir().unwrap();
    let cfg = resolve(&tiny_args(
        out.path(),
        "ablate",
        7,
        &[
            "teacher.hidden_dim=24",
            "teacher.intermediate_dim=48",
            "teacher.num_heads=12",
            "student.hidden_dim=12",
            "student.intermediate_dim=24",
            "student.num_heads=12",
            "distill.splits=12",
        ],
    ))
    .unwrap();
    let dir = run(&cfg).unwrap();

    let expected = crate::pipeline::expected_cell_count(&crate::pipeline::AblationBase {
        task: cfg.task.clone(),
        teacher_config: cfg.teacher_config(),
        student_config: cfg.student_config(),
        dcfg: cfg.distill_config().unwrap(),
        tcfg: cfg.train.clone(),
    });

    let summary = fs::read_to_string(dir.join("summary.tsv")).unwrap();
    // Header, the teacher row, then one row per ablation cell.
    assert_eq!(summary.lines().count(), 2 + expected, "{summary}");
    for group in ["heads", "splits", "mode", "terms", "position", "stages"] {
        assert!(
            summary.lines().any(|l| l.split('\t').nth(1) == Some(group)),
            "no rows for the {group} family:\n{summary}"
        );
    }
    // Head-sweep rows carry the swept architecture, not the base one.
    let heads3 = summary
        .lines()
        .find(|l| l.starts_with("heads-3\t"))
        .expect("missing heads-3 row");
    assert!(heads3.contains("\theads\t"), "bad group column: {heads3}");

    // Every cell's metrics land in the shared stream alongside the teacher's.
    // Run ids are config fingerprints, so the five cells that coincide with
    // the base configuration (heads-12, splits-12, mode-concat, position-base,
    // stages-two) all carry the same id: 22 cells, 18 distinct runs.
    let metrics = fs::read_to_string(dir.join("metrics.ndjson")).unwrap();
    let ids: std::collections::BTreeSet<String> = metrics
        .lines()
        .map(|line| serde_json::from_str::<MetricRecord>(line).unwrap().run_id)
        .collect();
    assert_eq!(expected, 22);
    assert_eq!(ids.len(), 1 + 18, "distinct runs plus the teacher");
}

#[test]
fn benchmark_run_emits_one_row_per_model_and_batch_size() {
    let out = tempdir().unwrap();
    let cfg = resolve(&tiny_args(out.path(), "benchmark", 1, &[])).unwrap();
    let dir = run(&cfg).unwrap();

    let summary = fs::read_to_string(dir.join("summary.tsv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    let sizes = crate::pipeline::BENCH_BATCH_SIZES.len();
    assert_eq!(lines.len(), 1 + 2 * sizes, "bad table:\n{summary}");
    assert!(lines[0].starts_with("model\tbatch_size\t"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("teacher\t")).count(), sizes);
    assert_eq!(lines.iter().filter(|l| l.starts_with("student\t")).count(), sizes);
}

#[test]
fn plot_data_covers_every_recorded_series() {
    fn record(step: u64, emb: Option<f64>, acc: Option<f64>) -> MetricRecord {
        MetricRecord {
            run_id: "r".to_string(),
            config_hash: "h".to_string(),
            stage: "stage1".to_string(),
            step,
            losses: LossReport {
                emb,
                stage1_total: emb,
                ..LossReport::default()
            },
            train_loss: None,
            learning_rate: None,
            eval_accuracy: acc,
            wall_ms: 1.0,
        }
    }

    let records = vec![
        record(1, Some(0.5), None),
        record(2, Some(0.4), None),
        record(3, Some(0.3), Some(0.9)),
    ];
    let out = tempdir().unwrap();
    let files = emit_plot_data(&records, out.path()).unwrap();
    assert_eq!(files.len(), 3, "emb, stage1_total and accuracy: {files:?}");

    let emb = fs::read_to_string(out.path().join("loss_emb.tsv")).unwrap();
    let lines: Vec<&str> = emb.lines().collect();
    assert_eq!(lines[0], "step\tvalue");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "1\t0.5");

    let acc = fs::read_to_string(out.path().join("accuracy.tsv")).unwrap();
    assert_eq!(acc, "epoch\taccuracy\n1\t0.9\n");

    // Series that never fired produce no file.
    assert!(!out.path().join("loss_kd.tsv").exists());
}

#[test]
fn losscheck_run_passes_and_writes_its_report() {
    let out = tempdir().unwrap();
    let cfg = resolve(&tiny_args(out.path(), "losscheck", 11, &[])).unwrap();
    let dir = run(&cfg).expect("every loss check should pass");

    // 7 oracle comparisons, 9 per-term gradient checks, 2 stage composites.
    let report = fs::read_to_string(dir.join("losscheck.txt")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 18);
    for line in &lines {
        assert!(line.starts_with("PASS "), "failed check: {line}");
    }
    // Both halves of the suite are represented.
    assert!(lines.iter().any(|l| l.contains("oracle")));
    assert!(lines.iter().any(|l| l.contains("grad")));
}
