//! A minimal post-norm transformer encoder that exposes every intermediate
//! the distillation losses consume: post-norm embeddings, per-head
//! attention outputs (before the output projection), per-layer hidden
//! states, the pooled first-position representation and classifier logits.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{vconcat, NumResult, Tensor, TensorError};

/// Classification granularity: one label per sequence or one per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sequence,
    Token,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Sequence => "sequence",
            TaskKind::Token => "token",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "sequence" => Some(TaskKind::Sequence),
            "token" => Some(TaskKind::Token),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// Structural description of one encoder. Head width is derived:
/// `head_dim = hidden_dim / num_heads`, so total attention width stays
/// equal to the hidden width regardless of the head count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub task_kind: TaskKind,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> ModelResult<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{} must be >= 1", name)));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub emb_ln_scale: Tensor,
    pub emb_ln_shift: Tensor,
    pub layers: Vec<LayerWeights>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// One batch of tokenized inputs. Position 0 of every sample is the
/// always-present start-of-sequence slot whose final hidden state acts as
/// the pooled sample representation.
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub attention_mask: Vec<Vec<bool>>,
    pub labels: Labels,
}

#[derive(Debug, Clone)]
pub enum Labels {
    PerSequence(Vec<usize>),
    /// `None` marks positions the planted rule leaves unlabeled.
    PerToken(Vec<Vec<Option<usize>>>),
}

impl Batch {
    pub fn validate(&self) -> ModelResult<()> {
        if self.token_ids.is_empty() {
            return Err(ModelError::InvalidBatch("empty batch".into()));
        }
        if self.attention_mask.len() != self.token_ids.len() {
            return Err(ModelError::InvalidBatch("mask/ids count mismatch".into()));
        }
        for (ids, mask) in self.token_ids.iter().zip(&self.attention_mask) {
            if ids.len() != mask.len() {
                return Err(ModelError::InvalidBatch(
                    "mask length differs from sequence length".into(),
                ));
            }
            if ids.is_empty() || !mask[0] {
                return Err(ModelError::InvalidBatch(
                    "position 0 must exist and be unmasked".into(),
                ));
            }
        }
        match &self.labels {
            Labels::PerSequence(l) if l.len() != self.token_ids.len() => Err(
                ModelError::InvalidBatch("label count differs from batch size".into()),
            ),
            Labels::PerToken(l)
                if l.len() != self.token_ids.len()
                    || l.iter()
                        .zip(&self.token_ids)
                        .any(|(row, ids)| row.len() != ids.len()) =>
            {
                Err(ModelError::InvalidBatch(
                    "per-token labels must align with token ids".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Every intermediate of one sample's forward pass. Clones are cheap:
/// tensors are shared handles, not copies.
#[derive(Clone)]
pub struct SampleOutputs {
    /// Post-norm embedding matrix, |x| × d_h.
    pub embedding: Tensor,
    /// head_outputs[l][a]: per-head attention output before the output
    /// projection, |x| × d_k.
    pub head_outputs: Vec<Vec<Tensor>>,
    /// hidden_states[l]: post-FFN, post-residual, post-norm layer output.
    pub hidden_states: Vec<Tensor>,
}

impl SampleOutputs {
    pub fn last_hidden(&self) -> &Tensor {
        self.hidden_states.last().expect("at least one layer")
    }
}

pub enum Logits {
    PerSequence(Tensor),
    PerToken(Vec<Tensor>),
}

pub struct EncoderOutputs {
    pub samples: Vec<SampleOutputs>,
    /// Pooled first-position representations, b × d_h.
    pub pooled: Tensor,
    pub logits: Logits,
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_flat(rows, cols, truncated_normal(rng, rows * cols, 0.02))
        .expect("length matches by construction")
        .with_grad()
}

/// Standalone trainable projection with the same truncated-normal init as
/// model weights. Used for the learned maps that sit outside any model.
pub fn init_projection(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_weight(&mut rng, rows, cols)
}

/// Per-head scaled dot-product attention. The projections are d_h × d_k
/// single-head blocks; masked key positions receive zero attention
/// probability in every query row.
pub fn attention_head(
    h_prev: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mask: &[bool],
) -> NumResult<Tensor> {
    let q = h_prev.matmul(wq)?;
    let k = h_prev.matmul(wk)?;
    let v = h_prev.matmul(wv)?;
    let scale = 1.0 / (wq.cols() as f64).sqrt();
    let probs = q.matmul_nt(&k)?.scale(scale).softmax_rows_masked(Some(mask))?;
    probs.matmul(&v)
}

impl Model {
    /// Fresh trainable model; weights truncated-normal(std 0.02) from the
    /// seed, biases and layer-norm shifts zero, layer-norm scales one.
    /// Draw order is fixed (embeddings, then layers in order, then the
    /// classifier) so identical seeds give identical models.
    pub fn new(config: &ModelConfig, seed: u64) -> ModelResult<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let token_embedding = init_weight(&mut rng, config.vocab_size, d);
        let position_embedding = init_weight(&mut rng, config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: init_weight(&mut rng, d, d),
                wk: init_weight(&mut rng, d, d),
                wv: init_weight(&mut rng, d, d),
                wo: init_weight(&mut rng, d, d),
                ln1_scale: Tensor::filled(1, d, 1.0).with_grad(),
                ln1_shift: Tensor::zeros(1, d).with_grad(),
                ffn_w1: init_weight(&mut rng, d, config.intermediate_dim),
                ffn_b1: Tensor::zeros(1, config.intermediate_dim).with_grad(),
                ffn_w2: init_weight(&mut rng, config.intermediate_dim, d),
                ffn_b2: Tensor::zeros(1, d).with_grad(),
                ln2_scale: Tensor::filled(1, d, 1.0).with_grad(),
                ln2_shift: Tensor::zeros(1, d).with_grad(),
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            token_embedding,
            position_embedding,
            emb_ln_scale: Tensor::filled(1, d, 1.0).with_grad(),
            emb_ln_shift: Tensor::zeros(1, d).with_grad(),
            layers,
            classifier_w: init_weight(&mut rng, d, config.num_classes),
            classifier_b: Tensor::zeros(1, config.num_classes).with_grad(),
        })
    }

    /// Gradient-free copy: same values, no graph participation. Frozen
    /// models forward without recording anything, which is what keeps the
    /// teacher side of distillation cheap and provably untouched.
    pub fn freeze(&self) -> Model {
        Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.detach(),
            position_embedding: self.position_embedding.detach(),
            emb_ln_scale: self.emb_ln_scale.detach(),
            emb_ln_shift: self.emb_ln_shift.detach(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.detach(),
                    wk: l.wk.detach(),
                    wv: l.wv.detach(),
                    wo: l.wo.detach(),
                    ln1_scale: l.ln1_scale.detach(),
                    ln1_shift: l.ln1_shift.detach(),
                    ffn_w1: l.ffn_w1.detach(),
                    ffn_b1: l.ffn_b1.detach(),
                    ffn_w2: l.ffn_w2.detach(),
                    ffn_b2: l.ffn_b2.detach(),
                    ln2_scale: l.ln2_scale.detach(),
                    ln2_shift: l.ln2_shift.detach(),
                })
                .collect(),
            classifier_w: self.classifier_w.detach(),
            classifier_b: self.classifier_b.detach(),
        }
    }

    /// Stable (name, tensor) listing; the checkpoint format and the
    /// optimizer both rely on this order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embedding.token".to_string(), self.token_embedding.clone()),
            ("embedding.position".to_string(), self.position_embedding.clone()),
            ("embedding.ln.scale".to_string(), self.emb_ln_scale.clone()),
            ("embedding.ln.shift".to_string(), self.emb_ln_shift.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.push((format!("layer{}.attn.wq", n), l.wq.clone()));
            out.push((format!("layer{}.attn.wk", n), l.wk.clone()));
            out.push((format!("layer{}.attn.wv", n), l.wv.clone()));
            out.push((format!("layer{}.attn.wo", n), l.wo.clone()));
            out.push((format!("layer{}.ln1.scale", n), l.ln1_scale.clone()));
            out.push((format!("layer{}.ln1.shift", n), l.ln1_shift.clone()));
            out.push((format!("layer{}.ffn.w1", n), l.ffn_w1.clone()));
            out.push((format!("layer{}.ffn.b1", n), l.ffn_b1.clone()));
            out.push((format!("layer{}.ffn.w2", n), l.ffn_w2.clone()));
            out.push((format!("layer{}.ffn.b2", n), l.ffn_b2.clone()));
            out.push((format!("layer{}.ln2.scale", n), l.ln2_scale.clone()));
            out.push((format!("layer{}.ln2.shift", n), l.ln2_shift.clone()));
        }
        out.push(("classifier.weight".to_string(), self.classifier_w.clone()));
        out.push(("classifier.bias".to_string(), self.classifier_b.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Everything except the classifier head: the trainable set of the
    /// first distillation stage.
    pub fn encoder_parameters(&self) -> Vec<Tensor> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("classifier."))
            .map(|(_, t)| t)
            .collect()
    }

    /// Token + position embeddings followed by layer norm.
    pub fn embed(&self, token_ids: &[usize]) -> ModelResult<Tensor> {
        let len = token_ids.len();
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        for &id in token_ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let tok = self.token_embedding.gather_rows(token_ids)?;
        let pos = self.position_embedding.slice_rows(0, len)?;
        Ok(tok.add(&pos)?.layer_norm(&self.emb_ln_scale, &self.emb_ln_shift)?)
    }

    /// One encoder layer: per-head attention, concat, output projection,
    /// residual + norm, then FFN (affine, GELU, affine), residual + norm.
    /// Returns the per-head outputs alongside the layer's hidden state.
    pub fn layer_forward(
        &self,
        layer: usize,
        h_prev: &Tensor,
        mask: &[bool],
    ) -> ModelResult<(Vec<Tensor>, Tensor)> {
        let weights = self.layers.get(layer).ok_or_else(|| {
            ModelError::InvalidConfig(format!("layer index {} out of range", layer))
        })?;
        let dk = self.config.head_dim();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for a in 0..self.config.num_heads {
            let wq = weights.wq.slice_cols(a * dk, dk)?;
            let wk = weights.wk.slice_cols(a * dk, dk)?;
            let wv = weights.wv.slice_cols(a * dk, dk)?;
            heads.push(attention_head(h_prev, &wq, &wk, &wv, mask)?);
        }
        let mha = crate::numerics::hconcat(&heads)?.matmul(&weights.wo)?;
        let h_mid = h_prev
            .add(&mha)?
            .layer_norm(&weights.ln1_scale, &weights.ln1_shift)?;
        let ffn = h_mid
            .matmul(&weights.ffn_w1)?
            .add_bias_row(&weights.ffn_b1)?
            .gelu()
            .matmul(&weights.ffn_w2)?
            .add_bias_row(&weights.ffn_b2)?;
        let h_out = h_mid
            .add(&ffn)?
            .layer_norm(&weights.ln2_scale, &weights.ln2_shift)?;
        Ok((heads, h_out))
    }

    pub fn forward_sample(&self, token_ids: &[usize], mask: &[bool]) -> ModelResult<SampleOutputs> {
        let embedding = self.embed(token_ids)?;
        let mut head_outputs = Vec::with_capacity(self.config.num_layers);
        let mut hidden_states = Vec::with_capacity(self.config.num_layers);
        let mut h = embedding.clone();
        for l in 0..self.config.num_layers {
            let (heads, h_next) = self.layer_forward(l, &h, mask)?;
            head_outputs.push(heads);
            hidden_states.push(h_next.clone());
            h = h_next;
        }
        Ok(SampleOutputs {
            embedding,
            head_outputs,
            hidden_states,
        })
    }

    /// Full forward over a batch: all per-sample intermediates, the pooled
    /// first-position matrix, and classifier logits (per sequence or per
    /// token depending on the configured task).
    pub fn encoder_forward(&self, batch: &Batch) -> ModelResult<EncoderOutputs> {
        batch.validate()?;
        let mut samples = Vec::with_capacity(batch.len());
        for (ids, mask) in batch.token_ids.iter().zip(&batch.attention_mask) {
            samples.push(self.forward_sample(ids, mask)?);
        }
        let cls_rows: Vec<Tensor> = samples
            .iter()
            .map(|s| s.last_hidden().slice_rows(0, 1))
            .collect::<NumResult<_>>()?;
        let pooled = vconcat(&cls_rows)?;
        let logits = match self.config.task_kind {
            TaskKind::Sequence => Logits::PerSequence(
                pooled
                    .matmul(&self.classifier_w)?
                    .add_bias_row(&self.classifier_b)?,
            ),
            TaskKind::Token => Logits::PerToken(
                samples
                    .iter()
                    .map(|s| {
                        s.last_hidden()
                            .matmul(&self.classifier_w)?
                            .add_bias_row(&self.classifier_b)
                    })
                    .collect::<NumResult<_>>()?,
            ),
        };
        Ok(EncoderOutputs {
            samples,
            pooled,
            logits,
        })
    }
}

/// Exact parameter count of a model instantiated from `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.hidden_dim;
    let di = config.intermediate_dim;
    let embeddings = config.vocab_size * d + config.max_seq_len * d + 2 * d;
    let per_layer = 4 * d * d + 2 * d // attention + first norm
        + d * di + di + di * d + d    // ffn
        + 2 * d; // second norm
    let classifier = d * config.num_classes + config.num_classes;
    embeddings + config.num_layers * per_layer + classifier
}

pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model};
