//! Run dispatch and the artifact layout.
//!
//! Every run gets its own directory under the output root, named by kind,
//! config fingerprint and seed. The resolved config is written before any
//! training step so a crashed run still documents exactly what it was.
//! Alongside it: `metrics.ndjson` (one event per line), checkpoints for
//! the models the run trained, `summary.tsv`, and per-series plot data.
//! Everything except the wall-clock and speed columns is byte-identical
//! across reruns of the same config and seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::LossReport;
use crate::model::{count_params, save_model, Model, ModelConfig};
use crate::pipeline::{
    ablation_suite, benchmark_inference, distill, distill_one_stage, generate_task, train_teacher,
    AblationBase, MetricRecord, RunRecord, BENCH_BATCH_SIZES,
};

use super::config::{to_resolved_toml, BenchSettings, ExperimentConfig, RunKind};
use super::losscheck::run_losscheck;
use super::CliError;

/// Batch size used for the summary speed-ratio column.
const SPEED_BATCH: usize = 32;

/// Executes the configured run and returns its output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let run_dir = Path::new(&cfg.out_dir).join(cfg.experiment_id());
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("resolved-config.toml"), to_resolved_toml(cfg))?;
    println!("{} -> {}", cfg.kind.as_str(), run_dir.display());
    match cfg.kind {
        RunKind::TrainTeacher => run_train_teacher(cfg, &run_dir)?,
        RunKind::Distill => run_distill(cfg, &run_dir, false)?,
        RunKind::DistillOneStage => run_distill(cfg, &run_dir, true)?,
        RunKind::Ablate => run_ablate(cfg, &run_dir)?,
        RunKind::Benchmark => run_benchmark(cfg, &run_dir)?,
        RunKind::Losscheck => run_losscheck_kind(cfg, &run_dir)?,
    }
    Ok(run_dir)
}

fn write_metrics(path: &Path, runs: &[&RunRecord]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for run in runs {
        run.write_ndjson(&mut buf)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn run_train_teacher(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let (train, eval) = generate_task(&cfg.task)?;
    let teacher_config = cfg.teacher_config();
    let (teacher, run) = train_teacher(&teacher_config, &cfg.train, &train, &eval)?;
    println!("teacher eval accuracy {:.4}", run.final_eval_accuracy);
    save_model(&teacher, &dir.join("teacher.ckpt"))?;
    write_metrics(&dir.join("metrics.ndjson"), &[&run])?;
    emit_plot_data(&run.records, &dir.join("plots"))?;
    let mut probe = SpeedProbe::new(&cfg.bench);
    let teacher_ms = probe.median_ms(&teacher_config)?;
    let row = make_row(
        "teacher",
        "teacher",
        &teacher_config,
        &run,
        run.param_count,
        teacher_ms,
        &mut probe,
    )?;
    finish_summary(dir, &[row])
}

fn run_distill(cfg: &ExperimentConfig, dir: &Path, one_stage: bool) -> Result<(), CliError> {
    let (train, eval) = generate_task(&cfg.task)?;
    let teacher_config = cfg.teacher_config();
    let student_config = cfg.student_config();
    let dcfg = cfg.distill_config()?;
    let (teacher, teacher_run) = train_teacher(&teacher_config, &cfg.train, &train, &eval)?;
    println!("teacher eval accuracy {:.4}", teacher_run.final_eval_accuracy);
    let outcome = if one_stage {
        distill_one_stage(&teacher, &student_config, &dcfg, &cfg.train, &train, &eval)?
    } else {
        distill(&teacher, &student_config, &dcfg, &cfg.train, &train, &eval)?
    };
    println!("student eval accuracy {:.4}", outcome.run.final_eval_accuracy);
    save_model(&teacher, &dir.join("teacher.ckpt"))?;
    save_model(&outcome.student, &dir.join("student.ckpt"))?;
    write_metrics(&dir.join("metrics.ndjson"), &[&teacher_run, &outcome.run])?;
    emit_plot_data(&outcome.run.records, &dir.join("plots"))?;
    let mut probe = SpeedProbe::new(&cfg.bench);
    let teacher_ms = probe.median_ms(&teacher_config)?;
    let rows = vec![
        make_row(
            "teacher",
            "teacher",
            &teacher_config,
            &teacher_run,
            teacher_run.param_count,
            teacher_ms,
            &mut probe,
        )?,
        make_row(
            "student",
            if one_stage { "one-stage" } else { "two-stage" },
            &student_config,
            &outcome.run,
            teacher_run.param_count,
            teacher_ms,
            &mut probe,
        )?,
    ];
    finish_summary(dir, &rows)
}

fn run_ablate(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let base = AblationBase {
        task: cfg.task.clone(),
        teacher_config: cfg.teacher_config(),
        student_config: cfg.student_config(),
        dcfg: cfg.distill_config()?,
        tcfg: cfg.train.clone(),
    };
    let report = ablation_suite(&base)?;
    println!(
        "teacher eval accuracy {:.4}; {} cells",
        report.teacher_run.final_eval_accuracy,
        report.cells.len()
    );
    let mut runs: Vec<&RunRecord> = vec![&report.teacher_run];
    runs.extend(report.cells.iter().map(|c| &c.run));
    write_metrics(&dir.join("metrics.ndjson"), &runs)?;
    let mut probe = SpeedProbe::new(&cfg.bench);
    let teacher_ms = probe.median_ms(&base.teacher_config)?;
    let mut rows = vec![make_row(
        "teacher",
        "teacher",
        &base.teacher_config,
        &report.teacher_run,
        report.teacher_run.param_count,
        teacher_ms,
        &mut probe,
    )?];
    for cell in &report.cells {
        println!("cell {:<18} accuracy {:.4}", cell.cell, cell.eval_accuracy);
        rows.push(make_row(
            &cell.cell,
            &cell.group,
            &cell.student_config,
            &cell.run,
            report.teacher_run.param_count,
            teacher_ms,
            &mut probe,
        )?);
    }
    finish_summary(dir, &rows)
}

fn run_benchmark(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let teacher_config = cfg.teacher_config();
    let student_config = cfg.student_config();
    let teacher = Model::new(&teacher_config, cfg.train.seed)?.freeze();
    let student = Model::new(&student_config, cfg.train.seed)?.freeze();
    let reps = cfg.bench.reps;
    let warmup = cfg.bench.warmup;
    let t_rows = benchmark_inference(&teacher, &BENCH_BATCH_SIZES, reps, warmup, cfg.train.seed)?;
    let s_rows = benchmark_inference(&student, &BENCH_BATCH_SIZES, reps, warmup, cfg.train.seed)?;
    let mut table =
        String::from("model\tbatch_size\treps\twarmup\tmedian_ms\tstd_ms\tparams\tspeed_ratio\n");
    let pairs = [
        ("teacher", &t_rows, count_params(&teacher_config)),
        ("student", &s_rows, count_params(&student_config)),
    ];
    for (name, rows, params) in pairs {
        for (i, r) in rows.iter().enumerate() {
            let ratio = t_rows[i].median_ms / r.median_ms;
            let _ = writeln!(
                table,
                "{name}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{params}\t{ratio:.3}",
                r.batch_size, r.reps, r.warmup, r.median_ms, r.std_ms
            );
        }
    }
    fs::write(dir.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_losscheck_kind(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let checks = run_losscheck(cfg.train.seed);
    let mut text = String::new();
    for check in &checks {
        let line = check.line();
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(dir.join("losscheck.txt"), &text)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: checks.len(),
        });
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

/// Writes per-series plot data: one `loss_<term>.tsv` per loss term that
/// appears in the records (header `step value`, one row per record carrying
/// that term) and `accuracy.tsv` over eval passes numbered as epochs.
pub fn emit_plot_data(records: &[MetricRecord], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    type Getter = fn(&MetricRecord) -> Option<f64>;
    let series: [(&str, Getter); 11] = [
        ("emb", |r| r.losses.emb),
        ("mha", |r| r.losses.mha),
        ("ffn", |r| r.losses.ffn),
        ("mha_on_ffn", |r| r.losses.mha_on_ffn),
        ("ffn_on_attn", |r| r.losses.ffn_on_attn),
        ("ss", |r| r.losses.ss),
        ("sc", |r| r.losses.sc),
        ("kd", |r| r.losses.kd),
        ("stage1_total", |r| r.losses.stage1_total),
        ("stage2_total", |r| r.losses.stage2_total),
        ("train_loss", |r| r.train_loss),
    ];
    let mut written = Vec::new();
    for (name, get) in series {
        let mut body = String::from("step\tvalue\n");
        let mut any = false;
        for record in records {
            if let Some(v) = get(record) {
                let _ = writeln!(body, "{}\t{}", record.step, v);
                any = true;
            }
        }
        if any {
            let path = dir.join(format!("loss_{name}.tsv"));
            fs::write(&path, body)?;
            written.push(path);
        }
    }
    let mut body = String::from("epoch\taccuracy\n");
    let mut epoch = 0usize;
    for record in records {
        if let Some(acc) = record.eval_accuracy {
            epoch += 1;
            let _ = writeln!(body, "{epoch}\t{acc}");
        }
    }
    if epoch > 0 {
        let path = dir.join("accuracy.tsv");
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// Forward-pass timer with an architecture-keyed cache, so repeated rows
/// of the same shape (ablation cells mostly share one) time only once.
/// Weights are irrelevant to timing, so a fresh init is used.
struct SpeedProbe<'a> {
    bench: &'a BenchSettings,
    cache: HashMap<String, f64>,
}

impl<'a> SpeedProbe<'a> {
    fn new(bench: &'a BenchSettings) -> Self {
        SpeedProbe {
            bench,
            cache: HashMap::new(),
        }
    }

    fn median_ms(&mut self, config: &ModelConfig) -> Result<f64, CliError> {
        let key = serde_json::to_string(config).expect("model config serializes");
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let model = Model::new(config, 0)?.freeze();
        let rows = benchmark_inference(
            &model,
            &[SPEED_BATCH],
            self.bench.reps,
            self.bench.warmup,
            0,
        )?;
        let v = rows[0].median_ms;
        self.cache.insert(key, v);
        Ok(v)
    }
}

struct SummaryRow {
    name: String,
    role: String,
    params: usize,
    param_ratio: f64,
    speed_ratio: f64,
    accuracy: f64,
    train_loss: Option<f64>,
    terms: LossReport,
}

/// Last reported value per loss term plus the last hard-label loss; a
/// two-stage run leaves each term at its final step in its own stage.
fn final_terms(records: &[MetricRecord]) -> (LossReport, Option<f64>) {
    let mut terms = LossReport::default();
    let mut train_loss = None;
    for r in records {
        let l = &r.losses;
        if l.emb.is_some() {
            terms.emb = l.emb;
        }
        if l.mha.is_some() {
            terms.mha = l.mha;
        }
        if l.ffn.is_some() {
            terms.ffn = l.ffn;
        }
        if l.mha_on_ffn.is_some() {
            terms.mha_on_ffn = l.mha_on_ffn;
        }
        if l.ffn_on_attn.is_some() {
            terms.ffn_on_attn = l.ffn_on_attn;
        }
        if l.ss.is_some() {
            terms.ss = l.ss;
        }
        if l.sc.is_some() {
            terms.sc = l.sc;
        }
        if l.kd.is_some() {
            terms.kd = l.kd;
        }
        if l.stage1_total.is_some() {
            terms.stage1_total = l.stage1_total;
        }
        if l.stage2_total.is_some() {
            terms.stage2_total = l.stage2_total;
        }
        if r.train_loss.is_some() {
            train_loss = r.train_loss;
        }
    }
    (terms, train_loss)
}

fn make_row(
    name: &str,
    role: &str,
    config: &ModelConfig,
    run: &RunRecord,
    teacher_params: usize,
    teacher_ms: f64,
    probe: &mut SpeedProbe,
) -> Result<SummaryRow, CliError> {
    let (terms, train_loss) = final_terms(&run.records);
    let ms = probe.median_ms(config)?;
    Ok(SummaryRow {
        name: name.to_string(),
        role: role.to_string(),
        params: run.param_count,
        param_ratio: teacher_params as f64 / run.param_count as f64,
        speed_ratio: teacher_ms / ms,
        accuracy: run.final_eval_accuracy,
        train_loss,
        terms,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// Tab-separated summary. `speed_ratio` is the one wall-clock-derived
/// column; everything else reruns byte-identically for a fixed config.
fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "name\trole\tparams\tparam_ratio\tspeed_ratio\teval_accuracy\ttrain_loss\
         \temb\tmha\tffn\tmha_on_ffn\tffn_on_attn\tss\tsc\tkd\tstage1_total\tstage2_total\n",
    );
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            r.role,
            r.params,
            r.param_ratio,
            r.speed_ratio,
            r.accuracy,
            fmt_opt(r.train_loss),
            fmt_opt(t.emb),
            fmt_opt(t.mha),
            fmt_opt(t.ffn),
            fmt_opt(t.mha_on_ffn),
            fmt_opt(t.ffn_on_attn),
            fmt_opt(t.ss),
            fmt_opt(t.sc),
            fmt_opt(t.kd),
            fmt_opt(t.stage1_total),
            fmt_opt(t.stage2_total),
        );
    }
    s
}

fn finish_summary(dir: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let table = summary_table(rows);
    fs::write(dir.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
