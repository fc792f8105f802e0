//! Experiment configuration: a flat dotted-key TOML file, `--set`
//! overrides on top, and a resolved emission with every value explicit so
//! a run can be reproduced from its output directory alone.
//!
//! Keys nest exactly one level (`train.seed`, `teacher.hidden_dim`).
//! Unknown keys are rejected, never ignored: a typo must fail the run, not
//! silently fall back to a default. The two model sections carry only the
//! architecture knobs; vocabulary size, sequence length, class count and
//! task kind always come from the task so the three can never disagree.

use std::fmt::Write as _;

use crate::distill::{
    uniform_layer_map, DistillConfig, SplitMode, SplitSpec, Stage1Terms, Stage2Terms, DEFAULT_RHO,
    DEFAULT_TAU,
};
use crate::model::{ModelConfig, TaskKind};
use crate::optim::OptimizerKind;
use crate::pipeline::{fingerprint, SyntheticTaskSpec, TrainConfig};

use super::{Args, CliError};

/// Environment variable consulted for the default output root.
pub const OUT_DIR_ENV: &str = "KDLAB_OUT";

/// Output root when neither `out_dir`, `--out` nor the environment set one.
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    TrainTeacher,
    Distill,
    DistillOneStage,
    Ablate,
    Benchmark,
    Losscheck,
}

impl RunKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunKind::TrainTeacher => "train-teacher",
            RunKind::Distill => "distill",
            RunKind::DistillOneStage => "distill-one-stage",
            RunKind::Ablate => "ablate",
            RunKind::Benchmark => "benchmark",
            RunKind::Losscheck => "losscheck",
        }
    }

    pub fn parse(s: &str) -> Result<RunKind, CliError> {
        match s {
            "train-teacher" => Ok(RunKind::TrainTeacher),
            "distill" => Ok(RunKind::Distill),
            "distill-one-stage" => Ok(RunKind::DistillOneStage),
            "ablate" => Ok(RunKind::Ablate),
            "benchmark" => Ok(RunKind::Benchmark),
            "losscheck" => Ok(RunKind::Losscheck),
            other => Err(CliError::Config(format!(
                "unknown run kind {other:?}; expected train-teacher, distill, \
                 distill-one-stage, ablate, benchmark or losscheck"
            ))),
        }
    }
}

/// Architecture knobs for one model; everything else is task-derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_heads: usize,
}

/// Flattened distillation settings; `distill_config` assembles the real
/// [`DistillConfig`] with the layer map derived from the two depths.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub splits: usize,
    pub split_mode: SplitMode,
    pub split_seed: u64,
    pub rho: f64,
    pub tau: f64,
    pub normalize: bool,
    pub use_emb: bool,
    pub use_mha: bool,
    pub use_ffn: bool,
    pub use_mha_on_ffn: bool,
    pub use_ffn_on_attn: bool,
    pub use_ss: bool,
    pub use_sc: bool,
    pub use_kd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSettings {
    pub reps: usize,
    pub warmup: usize,
}

/// Complete description of one run. Defaults describe the reference
/// desk-scale experiment: a 4-layer/12-head teacher distilled into a
/// 2-layer student on a noisy planted-rule sequence task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: RunKind,
    pub out_dir: String,
    pub task: SyntheticTaskSpec,
    pub teacher: ModelShape,
    pub student: ModelShape,
    pub distill: DistillSettings,
    pub train: TrainConfig,
    pub bench: BenchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: RunKind::Distill,
            out_dir: std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| DEFAULT_OUT_DIR.into()),
            task: SyntheticTaskSpec {
                kind: TaskKind::Sequence,
                vocab_size: 30,
                seq_len: 12,
                num_classes: 3,
                num_train: 384,
                num_eval: 256,
                noise_rate: 0.3,
                seed: 7,
            },
            teacher: ModelShape {
                num_layers: 4,
                hidden_dim: 48,
                intermediate_dim: 96,
                num_heads: 12,
            },
            student: ModelShape {
                num_layers: 2,
                hidden_dim: 24,
                intermediate_dim: 48,
                num_heads: 12,
            },
            distill: DistillSettings {
                splits: 12,
                split_mode: SplitMode::Concat,
                split_seed: 1234,
                rho: DEFAULT_RHO,
                tau: DEFAULT_TAU,
                normalize: true,
                use_emb: true,
                use_mha: true,
                use_ffn: true,
                use_mha_on_ffn: false,
                use_ffn_on_attn: false,
                use_ss: true,
                use_sc: true,
                use_kd: true,
            },
            train: TrainConfig {
                teacher_epochs: 30,
                stage1_epochs: 8,
                stage2_epochs: 8,
                batch_size: 16,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                seed: 1,
                grad_clip: None,
            },
            bench: BenchSettings {
                reps: 30,
                warmup: 5,
            },
        }
    }
}

impl ExperimentConfig {
    /// Teacher architecture with the task-derived fields filled in.
    pub fn teacher_config(&self) -> ModelConfig {
        shape_to_model(&self.teacher, &self.task)
    }

    pub fn student_config(&self) -> ModelConfig {
        shape_to_model(&self.student, &self.task)
    }

    /// Assembles the loss-layer config. The layer map is always the uniform
    /// one over the two configured depths.
    pub fn distill_config(&self) -> Result<DistillConfig, CliError> {
        let layer_map = uniform_layer_map(self.student.num_layers, self.teacher.num_layers)?;
        Ok(DistillConfig {
            layer_map,
            split: SplitSpec {
                num_splits: self.distill.splits,
                mode: self.distill.split_mode,
                rng_seed: self.distill.split_seed,
            },
            rho: self.distill.rho,
            tau: self.distill.tau,
            stage1_terms: Stage1Terms {
                emb: self.distill.use_emb,
                mha: self.distill.use_mha,
                ffn: self.distill.use_ffn,
                mha_on_ffn: self.distill.use_mha_on_ffn,
                ffn_on_attn: self.distill.use_ffn_on_attn,
            },
            stage2_terms: Stage2Terms {
                ss: self.distill.use_ss,
                sc: self.distill.use_sc,
                kd: self.distill.use_kd,
            },
            task_kind: self.task.kind,
            normalize_contrastive: self.distill.normalize,
        })
    }

    /// Checks only what the configured kind will actually use, so e.g. a
    /// teacher-only run does not require a distillable student.
    pub fn validate(&self) -> Result<(), CliError> {
        self.task.validate()?;
        self.train.validate()?;
        if self.bench.reps == 0 {
            return Err(CliError::Config("bench.reps must be at least 1".into()));
        }
        match self.kind {
            RunKind::Losscheck => {}
            RunKind::TrainTeacher => {
                self.teacher_config().validate()?;
            }
            RunKind::Benchmark => {
                self.teacher_config().validate()?;
                self.student_config().validate()?;
            }
            RunKind::Distill | RunKind::DistillOneStage | RunKind::Ablate => {
                let teacher = self.teacher_config();
                let student = self.student_config();
                teacher.validate()?;
                student.validate()?;
                self.distill_config()?.validate_for(&teacher, &student)?;
            }
        }
        Ok(())
    }

    /// Directory name for this run: kind, config fingerprint and seed. The
    /// fingerprint covers the resolved config with `out_dir` blanked, so
    /// moving the output root does not change the identity.
    pub fn experiment_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.out_dir = String::new();
        let hash = fingerprint(to_resolved_toml(&keyed).as_bytes());
        format!("{}-{}-s{}", self.kind.as_str(), hash, self.train.seed)
    }
}

fn shape_to_model(shape: &ModelShape, task: &SyntheticTaskSpec) -> ModelConfig {
    ModelConfig {
        num_layers: shape.num_layers,
        hidden_dim: shape.hidden_dim,
        intermediate_dim: shape.intermediate_dim,
        num_heads: shape.num_heads,
        vocab_size: task.vocab_size,
        max_seq_len: task.seq_len,
        num_classes: task.num_classes,
        task_kind: task.kind,
    }
}

/// Builds the full config: defaults, then the file, then `--set`
/// assignments in order, then the dedicated flags, then validation.
pub fn resolve(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        apply_file(&mut cfg, &text)?;
    }
    for assignment in &args.set {
        apply_set(&mut cfg, assignment)?;
    }
    if let Some(kind) = &args.kind {
        cfg.kind = RunKind::parse(kind)?;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.task.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies every key of a TOML document on top of `cfg`.
pub fn apply_file(cfg: &mut ExperimentConfig, text: &str) -> Result<(), CliError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                for (field, v) in section {
                    apply_field(cfg, key, field, v)?;
                }
            }
            _ => apply_top(cfg, key, value)?,
        }
    }
    Ok(())
}

/// Applies one `key=value` assignment from the command line. The value is
/// typed like a TOML scalar: integer, then float, then bool, else string.
pub fn apply_set(cfg: &mut ExperimentConfig, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!("--set expects KEY=VALUE, got {assignment:?}"))
    })?;
    let value = parse_scalar(raw.trim());
    match key.trim().split_once('.') {
        None => apply_top(cfg, key.trim(), &value),
        Some((section, field)) => apply_field(cfg, section, field, &value),
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    match raw {
        "true" => toml::Value::Boolean(true),
        "false" => toml::Value::Boolean(false),
        _ => toml::Value::String(raw.to_string()),
    }
}

fn apply_top(cfg: &mut ExperimentConfig, key: &str, value: &toml::Value) -> Result<(), CliError> {
    match key {
        "kind" => cfg.kind = RunKind::parse(&expect_str("kind", value)?)?,
        "out_dir" => cfg.out_dir = expect_str("out_dir", value)?,
        "task" | "teacher" | "student" | "distill" | "train" | "bench" => {
            return Err(CliError::Config(format!(
                "`{key}` holds a table of dotted keys like `{key}.x`, not a bare value"
            )));
        }
        other => {
            return Err(CliError::Config(format!("unknown config key `{other}`")));
        }
    }
    Ok(())
}

fn apply_field(
    cfg: &mut ExperimentConfig,
    section: &str,
    field: &str,
    value: &toml::Value,
) -> Result<(), CliError> {
    let path = format!("{section}.{field}");
    if value.is_table() {
        return Err(CliError::Config(format!(
            "config keys nest at most one level, but `{path}` holds a table"
        )));
    }
    match (section, field) {
        ("task", "kind") => {
            let s = expect_str(&path, value)?;
            cfg.task.kind = TaskKind::parse(&s).ok_or_else(|| {
                CliError::Config(format!(
                    "task.kind must be \"sequence\" or \"token\", got {s:?}"
                ))
            })?;
        }
        ("task", "vocab_size") => cfg.task.vocab_size = expect_usize(&path, value)?,
        ("task", "seq_len") => cfg.task.seq_len = expect_usize(&path, value)?,
        ("task", "num_classes") => cfg.task.num_classes = expect_usize(&path, value)?,
        ("task", "num_train") => cfg.task.num_train = expect_usize(&path, value)?,
        ("task", "num_eval") => cfg.task.num_eval = expect_usize(&path, value)?,
        ("task", "noise_rate") => cfg.task.noise_rate = expect_f64(&path, value)?,
        ("task", "seed") => cfg.task.seed = expect_u64(&path, value)?,

        ("teacher", _) => apply_shape(&mut cfg.teacher, &path, field, value)?,
        ("student", _) => apply_shape(&mut cfg.student, &path, field, value)?,

        ("distill", "splits") => cfg.distill.splits = expect_usize(&path, value)?,
        ("distill", "split_mode") => {
            cfg.distill.split_mode = SplitMode::parse(&expect_str(&path, value)?)?;
        }
        ("distill", "split_seed") => cfg.distill.split_seed = expect_u64(&path, value)?,
        ("distill", "rho") => cfg.distill.rho = expect_f64(&path, value)?,
        ("distill", "tau") => cfg.distill.tau = expect_f64(&path, value)?,
        ("distill", "normalize") => cfg.distill.normalize = expect_bool(&path, value)?,
        ("distill", "use_emb") => cfg.distill.use_emb = expect_bool(&path, value)?,
        ("distill", "use_mha") => cfg.distill.use_mha = expect_bool(&path, value)?,
        ("distill", "use_ffn") => cfg.distill.use_ffn = expect_bool(&path, value)?,
        ("distill", "use_mha_on_ffn") => {
            cfg.distill.use_mha_on_ffn = expect_bool(&path, value)?;
        }
        ("distill", "use_ffn_on_attn") => {
            cfg.distill.use_ffn_on_attn = expect_bool(&path, value)?;
        }
        ("distill", "use_ss") => cfg.distill.use_ss = expect_bool(&path, value)?,
        ("distill", "use_sc") => cfg.distill.use_sc = expect_bool(&path, value)?,
        ("distill", "use_kd") => cfg.distill.use_kd = expect_bool(&path, value)?,

        ("train", "teacher_epochs") => cfg.train.teacher_epochs = expect_usize(&path, value)?,
        ("train", "stage1_epochs") => cfg.train.stage1_epochs = expect_usize(&path, value)?,
        ("train", "stage2_epochs") => cfg.train.stage2_epochs = expect_usize(&path, value)?,
        ("train", "batch_size") => cfg.train.batch_size = expect_usize(&path, value)?,
        ("train", "learning_rate") => cfg.train.learning_rate = expect_f64(&path, value)?,
        ("train", "optimizer") => {
            let s = expect_str(&path, value)?;
            cfg.train.optimizer = OptimizerKind::parse(&s).ok_or_else(|| {
                CliError::Config(format!(
                    "train.optimizer must be \"adam\" or \"sgd\", got {s:?}"
                ))
            })?;
        }
        ("train", "seed") => cfg.train.seed = expect_u64(&path, value)?,
        // 0 disables clipping; TOML has no way to clear a value otherwise.
        ("train", "grad_clip") => {
            let v = expect_f64(&path, value)?;
            cfg.train.grad_clip = if v == 0.0 { None } else { Some(v) };
        }

        ("bench", "reps") => cfg.bench.reps = expect_usize(&path, value)?,
        ("bench", "warmup") => cfg.bench.warmup = expect_usize(&path, value)?,

        _ => {
            return Err(CliError::Config(format!("unknown config key `{path}`")));
        }
    }
    Ok(())
}

fn apply_shape(
    shape: &mut ModelShape,
    path: &str,
    field: &str,
    value: &toml::Value,
) -> Result<(), CliError> {
    match field {
        "num_layers" => shape.num_layers = expect_usize(path, value)?,
        "hidden_dim" => shape.hidden_dim = expect_usize(path, value)?,
        "intermediate_dim" => shape.intermediate_dim = expect_usize(path, value)?,
        "num_heads" => shape.num_heads = expect_usize(path, value)?,
        _ => {
            return Err(CliError::Config(format!("unknown config key `{path}`")));
        }
    }
    Ok(())
}

fn expect_str(path: &str, value: &toml::Value) -> Result<String, CliError> {
    value
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| CliError::Config(format!("{path} must be a string, got {value}")))
}

fn expect_bool(path: &str, value: &toml::Value) -> Result<bool, CliError> {
    value
        .as_bool()
        .ok_or_else(|| CliError::Config(format!("{path} must be true or false, got {value}")))
}

fn expect_usize(path: &str, value: &toml::Value) -> Result<usize, CliError> {
    match value.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => Err(CliError::Config(format!(
            "{path} must be a non-negative integer, got {value}"
        ))),
    }
}

fn expect_u64(path: &str, value: &toml::Value) -> Result<u64, CliError> {
    match value.as_integer() {
        Some(i) if i >= 0 => Ok(i as u64),
        _ => Err(CliError::Config(format!(
            "{path} must be a non-negative integer, got {value}"
        ))),
    }
}

fn expect_f64(path: &str, value: &toml::Value) -> Result<f64, CliError> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(CliError::Config(format!(
            "{path} must be a number, got {value}"
        ))),
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_f64(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

/// Renders the config with every key present and a fixed order, so the
/// output both documents all defaults and re-parses to an equal config.
/// `train.grad_clip = 0.0` encodes "no clipping".
pub fn to_resolved_toml(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind = {}", toml_str(cfg.kind.as_str()));
    let _ = writeln!(s, "out_dir = {}", toml_str(&cfg.out_dir));

    let _ = writeln!(s, "\n[task]");
    let _ = writeln!(s, "kind = {}", toml_str(cfg.task.kind.as_str()));
    let _ = writeln!(s, "vocab_size = {}", cfg.task.vocab_size);
    let _ = writeln!(s, "seq_len = {}", cfg.task.seq_len);
    let _ = writeln!(s, "num_classes = {}", cfg.task.num_classes);
    let _ = writeln!(s, "num_train = {}", cfg.task.num_train);
    let _ = writeln!(s, "num_eval = {}", cfg.task.num_eval);
    let _ = writeln!(s, "noise_rate = {}", toml_f64(cfg.task.noise_rate));
    let _ = writeln!(s, "seed = {}", cfg.task.seed);

    for (name, shape) in [("teacher", &cfg.teacher), ("student", &cfg.student)] {
        let _ = writeln!(s, "\n[{name}]");
        let _ = writeln!(s, "num_layers = {}", shape.num_layers);
        let _ = writeln!(s, "hidden_dim = {}", shape.hidden_dim);
        let _ = writeln!(s, "intermediate_dim = {}", shape.intermediate_dim);
        let _ = writeln!(s, "num_heads = {}", shape.num_heads);
    }

    let d = &cfg.distill;
    let _ = writeln!(s, "\n[distill]");
    let _ = writeln!(s, "splits = {}", d.splits);
    let _ = writeln!(s, "split_mode = {}", toml_str(d.split_mode.as_str()));
    let _ = writeln!(s, "split_seed = {}", d.split_seed);
    let _ = writeln!(s, "rho = {}", toml_f64(d.rho));
    let _ = writeln!(s, "tau = {}", toml_f64(d.tau));
    let _ = writeln!(s, "normalize = {}", d.normalize);
    let _ = writeln!(s, "use_emb = {}", d.use_emb);
    let _ = writeln!(s, "use_mha = {}", d.use_mha);
    let _ = writeln!(s, "use_ffn = {}", d.use_ffn);
    let _ = writeln!(s, "use_mha_on_ffn = {}", d.use_mha_on_ffn);
    let _ = writeln!(s, "use_ffn_on_attn = {}", d.use_ffn_on_attn);
    let _ = writeln!(s, "use_ss = {}", d.use_ss);
    let _ = writeln!(s, "use_sc = {}", d.use_sc);
    let _ = writeln!(s, "use_kd = {}", d.use_kd);

    let t = &cfg.train;
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(s, "teacher_epochs = {}", t.teacher_epochs);
    let _ = writeln!(s, "stage1_epochs = {}", t.stage1_epochs);
    let _ = writeln!(s, "stage2_epochs = {}", t.stage2_epochs);
    let _ = writeln!(s, "batch_size = {}", t.batch_size);
    let _ = writeln!(s, "learning_rate = {}", toml_f64(t.learning_rate));
    let _ = writeln!(s, "optimizer = {}", toml_str(t.optimizer.as_str()));
    let _ = writeln!(s, "seed = {}", t.seed);
    let _ = writeln!(s, "grad_clip = {}", toml_f64(t.grad_clip.unwrap_or(0.0)));

    let _ = writeln!(s, "\n[bench]");
    let _ = writeln!(s, "reps = {}", cfg.bench.reps);
    let _ = writeln!(s, "warmup = {}", cfg.bench.warmup);
    s
}
