//! Layer mapping, attention-head splitting, and the losses that train a
//! student encoder against a frozen teacher.
//!
//! Stage 1 matches internal structure: token-relation matrices of the
//! embeddings, per-split attention relations, and projected hidden states.
//! Stage 2 matches outcomes: sample-relation matrices over the batch, a
//! supervised contrastive term over pooled outputs, and softened logits.
//! All terms enter their stage total unweighted; switches exist so the
//! ablation harness can drop or relocate individual terms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderOutputs, Labels, Logits, ModelConfig, TaskKind};
use crate::numerics::{
    hconcat, kl_div_rows, kl_div_rows_masked, mse_masked, supcon_from_scores, vconcat, Tensor,
    TensorError,
};

/// Contrastive temperature default.
pub const DEFAULT_RHO: f64 = 0.07;
/// Prediction-softening temperature default.
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid layer map: {0}")]
    InvalidMap(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type DistillResult<T> = Result<T, DistillError>;

/// Pairs each student layer with the teacher layer it learns from.
/// Layers are numbered from 1; a pair (n, m) reads "student layer n
/// matches teacher layer m".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    /// Invariant: pairs strictly increase in both coordinates, stay in
    /// range, and end by pairing the two final layers.
    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> DistillResult<()> {
        if self.pairs.len() != student_layers {
            return Err(DistillError::InvalidMap(format!(
                "map covers {} layers but the student has {}",
                self.pairs.len(),
                student_layers
            )));
        }
        let mut prev: Option<(usize, usize)> = None;
        for &(n, m) in &self.pairs {
            if n == 0 || m == 0 || n > student_layers || m > teacher_layers {
                return Err(DistillError::InvalidMap(format!(
                    "pair ({n}, {m}) is out of range for {student_layers} student / {teacher_layers} teacher layers"
                )));
            }
            if let Some((pn, pm)) = prev {
                if n <= pn || m <= pm {
                    return Err(DistillError::InvalidMap(format!(
                        "pairs must increase strictly, got ({n}, {m}) after ({pn}, {pm})"
                    )));
                }
            }
            prev = Some((n, m));
        }
        let &(last_n, last_m) = self.pairs.last().expect("length checked above");
        if last_n != student_layers || last_m != teacher_layers {
            return Err(DistillError::InvalidMap(format!(
                "last pair ({last_n}, {last_m}) must pair layer {student_layers} with layer {teacher_layers}"
            )));
        }
        Ok(())
    }
}

/// Spreads N student layers evenly over M teacher layers: student layer n
/// is paired with teacher layer n * (M / N), so depth must divide evenly.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> DistillResult<LayerMap> {
    if student_layers == 0 || student_layers > teacher_layers {
        return Err(DistillError::InvalidMap(format!(
            "need 1 <= student depth <= teacher depth, got {student_layers} and {teacher_layers}"
        )));
    }
    if teacher_layers % student_layers != 0 {
        return Err(DistillError::InvalidMap(format!(
            "teacher depth {teacher_layers} is not a multiple of student depth {student_layers}"
        )));
    }
    let stride = teacher_layers / student_layers;
    Ok(LayerMap {
        pairs: (1..=student_layers).map(|n| (n, n * stride)).collect(),
    })
}

/// How each group of attention heads is reduced to one split tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Heads of a group are concatenated side by side (width g * d_k).
    Concat,
    /// Elementwise mean over the group (width d_k).
    Average,
    /// One group member drawn by seed (width d_k).
    Random,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::Concat => "concat",
            SplitMode::Average => "average",
            SplitMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> DistillResult<Self> {
        match s {
            "concat" => Ok(SplitMode::Concat),
            "average" => Ok(SplitMode::Average),
            "random" => Ok(SplitMode::Random),
            other => Err(DistillError::InvalidSplit(format!(
                "unknown split mode {other:?} (expected concat, average, or random)"
            ))),
        }
    }
}

/// Grouping of attention-head outputs into `num_splits` relation units.
/// Teacher and student share the split count, so the count must divide
/// both head counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_splits: usize,
    pub mode: SplitMode,
    /// Seed for the random mode's group-member draws; ignored otherwise.
    pub rng_seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, teacher_heads: usize, student_heads: usize) -> DistillResult<()> {
        if self.num_splits == 0 {
            return Err(DistillError::InvalidSplit("split count must be positive".into()));
        }
        for (side, heads) in [("teacher", teacher_heads), ("student", student_heads)] {
            if heads == 0 || heads % self.num_splits != 0 {
                return Err(DistillError::InvalidSplit(format!(
                    "{side} head count {heads} is not divisible by split count {}",
                    self.num_splits
                )));
            }
        }
        Ok(())
    }
}

/// Index drawn for one head group in random split mode. Deterministic in
/// (seed, layer, group); exposed so verification code can reproduce the
/// draw without re-running the split.
pub fn random_group_pick(seed: u64, layer: usize, group: usize, group_size: usize) -> usize {
    let mixed = seed
        ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (group as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.gen_range(0..group_size)
}

/// Groups per-head attention outputs into `spec.num_splits` contiguous
/// groups and reduces each group per the split mode. `layer` is the
/// 1-based index of the heads' own layer; random mode draws its group
/// member from (seed, layer, group) once per run rather than per step, so
/// the head selection stays stable during training.
pub fn mha_split(heads: &[Tensor], spec: &SplitSpec, layer: usize) -> DistillResult<Vec<Tensor>> {
    if heads.is_empty() || spec.num_splits == 0 || heads.len() % spec.num_splits != 0 {
        return Err(DistillError::InvalidSplit(format!(
            "cannot form {} splits from {} heads",
            spec.num_splits,
            heads.len()
        )));
    }
    let group = heads.len() / spec.num_splits;
    let mut out = Vec::with_capacity(spec.num_splits);
    for s in 0..spec.num_splits {
        let members = &heads[s * group..(s + 1) * group];
        let split = match spec.mode {
            SplitMode::Concat => hconcat(members)?,
            SplitMode::Average => {
                let mut acc = members[0].clone();
                for m in &members[1..] {
                    acc = acc.add(m)?;
                }
                acc.scale(1.0 / group as f64)
            }
            SplitMode::Random => {
                members[random_group_pick(spec.rng_seed, layer, s, group)].clone()
            }
        };
        out.push(split);
    }
    Ok(out)
}

/// Row-stochastic token-relation matrix softmax(X Xᵀ / √d). Masked key
/// positions get zero probability; masked query rows stay valid rows and
/// are excluded from loss averages by the callers' keep masks.
pub fn relation_matrix(x: &Tensor, d: usize, mask: Option<&[bool]>) -> DistillResult<Tensor> {
    if d == 0 || d != x.cols() {
        return Err(DistillError::InvalidConfig(format!(
            "relation scale dim {} does not match representation width {}",
            d,
            x.cols()
        )));
    }
    let logits = x.matmul_nt(x)?.scale(1.0 / (d as f64).sqrt());
    Ok(logits.softmax_rows_masked(mask)?)
}

/// Stage-1 term switches. The home placement puts the relation loss on
/// the attention sub-layer and the feature loss on the feed-forward
/// sub-layer; the two extra switches re-apply each loss at the other
/// sub-layer for the distillation-position ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Terms {
    pub emb: bool,
    pub mha: bool,
    pub ffn: bool,
    pub mha_on_ffn: bool,
    pub ffn_on_attn: bool,
}

impl Default for Stage1Terms {
    fn default() -> Self {
        Stage1Terms {
            emb: true,
            mha: true,
            ffn: true,
            mha_on_ffn: false,
            ffn_on_attn: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Terms {
    pub ss: bool,
    pub sc: bool,
    pub kd: bool,
}

impl Default for Stage2Terms {
    fn default() -> Self {
        Stage2Terms {
            ss: true,
            sc: true,
            kd: true,
        }
    }
}

/// Everything the loss layer needs to compare a teacher and a student:
/// layer pairing, split scheme, temperatures, and term switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub layer_map: LayerMap,
    pub split: SplitSpec,
    /// Contrastive temperature.
    pub rho: f64,
    /// Prediction-softening temperature.
    pub tau: f64,
    pub stage1_terms: Stage1Terms,
    pub stage2_terms: Stage2Terms,
    pub task_kind: TaskKind,
    /// L2-normalize the stacked contrastive embeddings before scoring.
    pub normalize_contrastive: bool,
}

impl DistillConfig {
    /// Default switches for the task. Token tasks disable the batch-level
    /// stage-2 terms: per-token labels give no single sample label to
    /// relate or contrast.
    pub fn new(layer_map: LayerMap, split: SplitSpec, task_kind: TaskKind) -> Self {
        let stage2_terms = match task_kind {
            TaskKind::Sequence => Stage2Terms::default(),
            TaskKind::Token => Stage2Terms {
                ss: false,
                sc: false,
                kd: true,
            },
        };
        DistillConfig {
            layer_map,
            split,
            rho: DEFAULT_RHO,
            tau: DEFAULT_TAU,
            stage1_terms: Stage1Terms::default(),
            stage2_terms,
            task_kind,
            normalize_contrastive: true,
        }
    }

    /// Internal consistency only; `validate_for` also checks model fit.
    pub fn validate(&self) -> DistillResult<()> {
        if !(self.rho > 0.0) {
            return Err(DistillError::InvalidConfig(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.tau > 0.0) {
            return Err(DistillError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.layer_map.pairs.is_empty() {
            return Err(DistillError::InvalidMap("empty layer map".into()));
        }
        if self.split.num_splits == 0 {
            return Err(DistillError::InvalidSplit("split count must be positive".into()));
        }
        if self.task_kind == TaskKind::Token && (self.stage2_terms.ss || self.stage2_terms.sc) {
            return Err(DistillError::InvalidConfig(
                "token tasks cannot enable the sample-relation or contrastive terms".into(),
            ));
        }
        Ok(())
    }

    /// Checks the map and split against an actual teacher/student pair.
    pub fn validate_for(&self, teacher: &ModelConfig, student: &ModelConfig) -> DistillResult<()> {
        self.validate()?;
        self.layer_map.validate(student.num_layers, teacher.num_layers)?;
        self.split.validate(teacher.num_heads, student.num_heads)?;
        if teacher.task_kind != self.task_kind || student.task_kind != self.task_kind {
            return Err(DistillError::InvalidConfig(format!(
                "task kind mismatch: distilling {} with teacher {} and student {}",
                self.task_kind.as_str(),
                teacher.task_kind.as_str(),
                student.task_kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Per-term loss values for one forward pass. Terms that were not
/// computed stay `None` and are omitted from serialized records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mha_on_ffn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_on_attn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_total: Option<f64>,
}

/// Detached view of a teacher-side tensor so no gradient ever reaches
/// teacher parameters, even if the caller passes a trainable model's
/// outputs. Free when the tensor is already graph-free.
fn detached(t: &Tensor) -> Tensor {
    if t.requires_grad() {
        t.detach()
    } else {
        t.clone()
    }
}

fn check_batch(op: &str, teacher: usize, student: usize, masks: usize) -> DistillResult<()> {
    if teacher == 0 || teacher != student || teacher != masks {
        return Err(DistillError::InvalidConfig(format!(
            "{op}: mismatched batch sizes (teacher {teacher}, student {student}, masks {masks})"
        )));
    }
    Ok(())
}

fn batch_mean(per_sample: Vec<Tensor>) -> DistillResult<Tensor> {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().expect("check_batch rejects empty batches");
    for t in iter {
        acc = acc.add(&t)?;
    }
    Ok(acc.scale(1.0 / n as f64))
}

fn sum_terms(terms: Vec<Tensor>) -> DistillResult<Tensor> {
    let mut iter = terms.into_iter();
    match iter.next() {
        None => Ok(Tensor::scalar(0.0)),
        Some(first) => {
            let mut acc = first;
            for t in iter {
                acc = acc.add(&t)?;
            }
            Ok(acc)
        }
    }
}

fn bounds_check(
    op: &str,
    layer: usize,
    available: usize,
    side: &str,
) -> DistillResult<()> {
    if layer == 0 || layer > available {
        return Err(DistillError::InvalidMap(format!(
            "{op}: mapped {side} layer {layer} outside 1..={available}"
        )));
    }
    Ok(())
}

/// Embedding relation loss: per sample, mean KL between teacher and
/// student token-relation rows over kept positions, then the batch mean.
/// `d_t` and `d_s` are the embedding widths used as relation scales.
pub fn loss_emb(
    e_t: &[Tensor],
    e_s: &[Tensor],
    d_t: usize,
    d_s: usize,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    check_batch("loss_emb", e_t.len(), e_s.len(), masks.len())?;
    let mut per_sample = Vec::with_capacity(e_t.len());
    for ((et, es), keep) in e_t.iter().zip(e_s).zip(masks) {
        if et.rows() != es.rows() {
            return Err(DistillError::InvalidConfig(format!(
                "loss_emb: teacher has {} tokens, student {}",
                et.rows(),
                es.rows()
            )));
        }
        let r_t = relation_matrix(&detached(et), d_t, Some(keep))?;
        let r_s = relation_matrix(es, d_s, Some(keep))?;
        per_sample.push(kl_div_rows_masked(&r_t, &r_s, Some(keep))?);
    }
    batch_mean(per_sample)
}

/// Attention relation loss: KL between teacher and student split
/// relations, averaged over splits and kept rows, summed over mapped
/// layer pairs, then the batch mean. Relation scales are each split's own
/// width, so concat and average splits of the same heads use different
/// scales by construction.
pub fn loss_mha(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    cfg: &DistillConfig,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    check_batch(
        "loss_mha",
        teacher_out.samples.len(),
        student_out.samples.len(),
        masks.len(),
    )?;
    if cfg.layer_map.pairs.is_empty() {
        return Err(DistillError::InvalidMap("empty layer map".into()));
    }
    let mut per_sample = Vec::with_capacity(masks.len());
    for ((ts, ss), keep) in teacher_out.samples.iter().zip(&student_out.samples).zip(masks) {
        let mut sample_total: Option<Tensor> = None;
        for &(n, m) in &cfg.layer_map.pairs {
            bounds_check("loss_mha", m, ts.head_outputs.len(), "teacher")?;
            bounds_check("loss_mha", n, ss.head_outputs.len(), "student")?;
            let t_heads: Vec<Tensor> = ts.head_outputs[m - 1].iter().map(detached).collect();
            let t_splits = mha_split(&t_heads, &cfg.split, m)?;
            let s_splits = mha_split(&ss.head_outputs[n - 1], &cfg.split, n)?;
            let mut split_sum: Option<Tensor> = None;
            for (tsp, ssp) in t_splits.iter().zip(&s_splits) {
                let r_t = relation_matrix(tsp, tsp.cols(), Some(keep))?;
                let r_s = relation_matrix(ssp, ssp.cols(), Some(keep))?;
                let kl = kl_div_rows_masked(&r_t, &r_s, Some(keep))?;
                split_sum = Some(match split_sum {
                    Some(acc) => acc.add(&kl)?,
                    None => kl,
                });
            }
            let pair_loss = split_sum
                .expect("split count is positive")
                .scale(1.0 / cfg.split.num_splits as f64);
            sample_total = Some(match sample_total {
                Some(acc) => acc.add(&pair_loss)?,
                None => pair_loss,
            });
        }
        per_sample.push(sample_total.expect("layer map is non-empty"));
    }
    batch_mean(per_sample)
}

/// Hidden-state feature loss: MSE between projected student hidden states
/// and teacher hidden states at mapped layers, masked positions excluded
/// from the mean and summed over pairs. The projection `w_h` is shared
/// across layers and receives gradients.
pub fn loss_ffn(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    layer_map: &LayerMap,
    w_h: &Tensor,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    check_batch(
        "loss_ffn",
        teacher_out.samples.len(),
        student_out.samples.len(),
        masks.len(),
    )?;
    if layer_map.pairs.is_empty() {
        return Err(DistillError::InvalidMap("empty layer map".into()));
    }
    let mut per_sample = Vec::with_capacity(masks.len());
    for ((ts, ss), keep) in teacher_out.samples.iter().zip(&student_out.samples).zip(masks) {
        let mut sample_total: Option<Tensor> = None;
        for &(n, m) in &layer_map.pairs {
            bounds_check("loss_ffn", m, ts.hidden_states.len(), "teacher")?;
            bounds_check("loss_ffn", n, ss.hidden_states.len(), "student")?;
            let projected = ss.hidden_states[n - 1].matmul(w_h)?;
            let target = detached(&ts.hidden_states[m - 1]);
            let pair_loss = mse_masked(&projected, &target, Some(keep))?;
            sample_total = Some(match sample_total {
                Some(acc) => acc.add(&pair_loss)?,
                None => pair_loss,
            });
        }
        per_sample.push(sample_total.expect("layer map is non-empty"));
    }
    batch_mean(per_sample)
}

/// Position-swap variant of the feature loss: the per-head attention
/// outputs of each mapped layer are concatenated back to one |x| × d_h
/// matrix and projected through the shared `w_h`, exactly as `loss_ffn`
/// treats the feed-forward outputs.
pub fn loss_ffn_on_attention(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    layer_map: &LayerMap,
    w_h: &Tensor,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    check_batch(
        "loss_ffn_on_attention",
        teacher_out.samples.len(),
        student_out.samples.len(),
        masks.len(),
    )?;
    if layer_map.pairs.is_empty() {
        return Err(DistillError::InvalidMap("empty layer map".into()));
    }
    let mut per_sample = Vec::with_capacity(masks.len());
    for ((ts, ss), keep) in teacher_out.samples.iter().zip(&student_out.samples).zip(masks) {
        let mut sample_total: Option<Tensor> = None;
        for &(n, m) in &layer_map.pairs {
            bounds_check("loss_ffn_on_attention", m, ts.head_outputs.len(), "teacher")?;
            bounds_check("loss_ffn_on_attention", n, ss.head_outputs.len(), "student")?;
            let t_heads: Vec<Tensor> = ts.head_outputs[m - 1].iter().map(detached).collect();
            let t_cat = hconcat(&t_heads)?;
            let s_cat = hconcat(&ss.head_outputs[n - 1])?;
            let pair_loss = mse_masked(&s_cat.matmul(w_h)?, &t_cat, Some(keep))?;
            sample_total = Some(match sample_total {
                Some(acc) => acc.add(&pair_loss)?,
                None => pair_loss,
            });
        }
        per_sample.push(sample_total.expect("layer map is non-empty"));
    }
    batch_mean(per_sample)
}

/// Position-swap variant of the relation loss: each mapped hidden state is
/// sliced into head-width column groups (pseudo-heads) and then split and
/// compared exactly like attention relations.
pub fn loss_mha_on_ffn(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    cfg: &DistillConfig,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    check_batch(
        "loss_mha_on_ffn",
        teacher_out.samples.len(),
        student_out.samples.len(),
        masks.len(),
    )?;
    if cfg.layer_map.pairs.is_empty() {
        return Err(DistillError::InvalidMap("empty layer map".into()));
    }
    let mut per_sample = Vec::with_capacity(masks.len());
    for ((ts, ss), keep) in teacher_out.samples.iter().zip(&student_out.samples).zip(masks) {
        let mut sample_total: Option<Tensor> = None;
        for &(n, m) in &cfg.layer_map.pairs {
            bounds_check("loss_mha_on_ffn", m, ts.hidden_states.len(), "teacher")?;
            bounds_check("loss_mha_on_ffn", n, ss.hidden_states.len(), "student")?;
            let t_pseudo = pseudo_heads(&detached(&ts.hidden_states[m - 1]), ts.head_outputs[m - 1].len())?;
            let s_pseudo = pseudo_heads(&ss.hidden_states[n - 1], ss.head_outputs[n - 1].len())?;
            let t_splits = mha_split(&t_pseudo, &cfg.split, m)?;
            let s_splits = mha_split(&s_pseudo, &cfg.split, n)?;
            let mut split_sum: Option<Tensor> = None;
            for (tsp, ssp) in t_splits.iter().zip(&s_splits) {
                let r_t = relation_matrix(tsp, tsp.cols(), Some(keep))?;
                let r_s = relation_matrix(ssp, ssp.cols(), Some(keep))?;
                let kl = kl_div_rows_masked(&r_t, &r_s, Some(keep))?;
                split_sum = Some(match split_sum {
                    Some(acc) => acc.add(&kl)?,
                    None => kl,
                });
            }
            let pair_loss = split_sum
                .expect("split count is positive")
                .scale(1.0 / cfg.split.num_splits as f64);
            sample_total = Some(match sample_total {
                Some(acc) => acc.add(&pair_loss)?,
                None => pair_loss,
            });
        }
        per_sample.push(sample_total.expect("layer map is non-empty"));
    }
    batch_mean(per_sample)
}

/// Slices a hidden state into `num_heads` contiguous column groups so the
/// split machinery can treat it like per-head attention output.
fn pseudo_heads(h: &Tensor, num_heads: usize) -> DistillResult<Vec<Tensor>> {
    if num_heads == 0 || h.cols() % num_heads != 0 {
        return Err(DistillError::InvalidSplit(format!(
            "hidden width {} does not divide into {} head groups",
            h.cols(),
            num_heads
        )));
    }
    let width = h.cols() / num_heads;
    (0..num_heads)
        .map(|i| Ok(h.slice_cols(i * width, width)?))
        .collect()
}

/// Sample-relation loss over the batch dimension: KL between the teacher
/// and student b × b pooled-output relation matrices. A single-sample
/// batch yields the constant matrix [[1]] on both sides and a zero loss.
pub fn loss_ss(g_t: &Tensor, g_s: &Tensor) -> DistillResult<Tensor> {
    if g_t.rows() != g_s.rows() {
        return Err(DistillError::InvalidConfig(format!(
            "loss_ss: teacher batch {} vs student batch {}",
            g_t.rows(),
            g_s.rows()
        )));
    }
    let r_t = relation_matrix(&detached(g_t), g_t.cols(), None)?;
    let r_s = relation_matrix(g_s, g_s.cols(), None)?;
    Ok(kl_div_rows(&r_t, &r_s)?)
}

/// Supervised contrastive loss over the stacked student and teacher
/// pooled outputs. Student rows are projected through `w_g` to the
/// teacher width, the 2b rows are optionally L2-normalized, and scores
/// are dot products scaled by 1/rho. Anchors whose label occurs nowhere
/// else are skipped; the result is the mean over the remaining anchors.
/// Gradients reach only the student rows and `w_g`.
pub fn loss_sc(
    g_t: &Tensor,
    g_s: &Tensor,
    labels: &[usize],
    w_g: &Tensor,
    rho: f64,
    normalize: bool,
) -> DistillResult<Tensor> {
    if !(rho > 0.0) {
        return Err(DistillError::InvalidConfig(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let b = g_s.rows();
    if g_t.rows() != b || labels.len() != b {
        return Err(DistillError::InvalidConfig(format!(
            "loss_sc: got {} teacher rows, {} student rows, {} labels",
            g_t.rows(),
            b,
            labels.len()
        )));
    }
    let projected = g_s.matmul(w_g)?;
    let stacked = vconcat(&[projected, detached(g_t)])?;
    let h = if normalize {
        stacked.l2_normalize_rows()?
    } else {
        stacked
    };
    let scores = h.matmul_nt(&h)?.scale(1.0 / rho);
    let mut doubled = labels.to_vec();
    doubled.extend_from_slice(labels);
    Ok(supcon_from_scores(&scores, &doubled)?)
}

/// Prediction loss: KL from the teacher's softened class distribution to
/// the student's. Sequence logits average over the batch; token logits
/// average over all kept positions across the batch.
pub fn loss_kd(
    z_t: &Logits,
    z_s: &Logits,
    tau: f64,
    masks: &[Vec<bool>],
) -> DistillResult<Tensor> {
    if !(tau > 0.0) {
        return Err(DistillError::InvalidConfig(format!(
            "tau must be positive, got {tau}"
        )));
    }
    match (z_t, z_s) {
        (Logits::PerSequence(t), Logits::PerSequence(s)) => {
            let p = detached(t).scale(1.0 / tau).softmax_rows();
            let q = s.scale(1.0 / tau).softmax_rows();
            Ok(kl_div_rows(&p, &q)?)
        }
        (Logits::PerToken(t), Logits::PerToken(s)) => {
            check_batch("loss_kd", t.len(), s.len(), masks.len())?;
            let mut weighted: Option<Tensor> = None;
            let mut total_kept = 0usize;
            for ((zt, zs), keep) in t.iter().zip(s).zip(masks) {
                let kept = keep.iter().filter(|k| **k).count();
                if kept == 0 {
                    continue;
                }
                let p = detached(zt).scale(1.0 / tau).softmax_rows();
                let q = zs.scale(1.0 / tau).softmax_rows();
                let kl = kl_div_rows_masked(&p, &q, Some(keep))?.scale(kept as f64);
                weighted = Some(match weighted {
                    Some(acc) => acc.add(&kl)?,
                    None => kl,
                });
                total_kept += kept;
            }
            match weighted {
                Some(acc) => Ok(acc.scale(1.0 / total_kept as f64)),
                None => Err(DistillError::InvalidConfig(
                    "loss_kd: no unmasked positions in the batch".into(),
                )),
            }
        }
        _ => Err(DistillError::InvalidConfig(
            "loss_kd: teacher and student logits are of different task kinds".into(),
        )),
    }
}

/// Sum of the enabled structural terms. Returns the differentiable total
/// alongside the per-term report; an empty term set yields a constant
/// zero with no gradient graph.
pub fn stage1_loss(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    cfg: &DistillConfig,
    w_h: &Tensor,
    masks: &[Vec<bool>],
) -> DistillResult<(Tensor, LossReport)> {
    cfg.validate()?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    if cfg.stage1_terms.emb {
        let e_t: Vec<Tensor> = teacher_out.samples.iter().map(|s| s.embedding.clone()).collect();
        let e_s: Vec<Tensor> = student_out.samples.iter().map(|s| s.embedding.clone()).collect();
        let d_t = e_t.first().map(Tensor::cols).unwrap_or(0);
        let d_s = e_s.first().map(Tensor::cols).unwrap_or(0);
        let term = loss_emb(&e_t, &e_s, d_t, d_s, masks)?;
        report.emb = Some(term.item());
        terms.push(term);
    }
    if cfg.stage1_terms.mha {
        let term = loss_mha(teacher_out, student_out, cfg, masks)?;
        report.mha = Some(term.item());
        terms.push(term);
    }
    if cfg.stage1_terms.ffn {
        let term = loss_ffn(teacher_out, student_out, &cfg.layer_map, w_h, masks)?;
        report.ffn = Some(term.item());
        terms.push(term);
    }
    if cfg.stage1_terms.mha_on_ffn {
        let term = loss_mha_on_ffn(teacher_out, student_out, cfg, masks)?;
        report.mha_on_ffn = Some(term.item());
        terms.push(term);
    }
    if cfg.stage1_terms.ffn_on_attn {
        let term = loss_ffn_on_attention(teacher_out, student_out, &cfg.layer_map, w_h, masks)?;
        report.ffn_on_attn = Some(term.item());
        terms.push(term);
    }
    let total = sum_terms(terms)?;
    report.stage1_total = Some(total.item());
    Ok((total, report))
}

/// Sum of the enabled outcome terms. Labels are only consulted by the
/// contrastive term, which requires one label per sample.
pub fn stage2_loss(
    teacher_out: &EncoderOutputs,
    student_out: &EncoderOutputs,
    labels: &Labels,
    cfg: &DistillConfig,
    w_g: &Tensor,
    masks: &[Vec<bool>],
) -> DistillResult<(Tensor, LossReport)> {
    cfg.validate()?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    if cfg.stage2_terms.ss {
        let term = loss_ss(&teacher_out.pooled, &student_out.pooled)?;
        report.ss = Some(term.item());
        terms.push(term);
    }
    if cfg.stage2_terms.sc {
        let Labels::PerSequence(seq_labels) = labels else {
            return Err(DistillError::InvalidConfig(
                "contrastive term needs one label per sample".into(),
            ));
        };
        let term = loss_sc(
            &teacher_out.pooled,
            &student_out.pooled,
            seq_labels,
            w_g,
            cfg.rho,
            cfg.normalize_contrastive,
        )?;
        report.sc = Some(term.item());
        terms.push(term);
    }
    if cfg.stage2_terms.kd {
        let term = loss_kd(&teacher_out.logits, &student_out.logits, cfg.tau, masks)?;
        report.kd = Some(term.item());
        terms.push(term);
    }
    let total = sum_terms(terms)?;
    report.stage2_total = Some(total.item());
    Ok((total, report))
}

#[cfg(test)]
mod tests;
