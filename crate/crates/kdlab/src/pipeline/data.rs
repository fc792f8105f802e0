//! Synthetic planted-rule tasks.
//!
//! Sequence kind: every content token belongs to a class (`(id - 1) mod
//! num_classes`) and the sample label is the majority class, ties broken
//! toward the lowest class. Token kind: position j is labeled by the
//! window sum `(id[j-1] + id[j]) mod num_classes` for j >= 2. Both rules
//! are exactly recoverable from the inputs, so a noise-free eval set has a
//! known-perfect classifier.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, Labels, TaskKind};

use super::{PipelineError, PipelineResult};

/// Fraction of content tokens drawn from the sample's target class when
/// generating sequence-kind inputs; the rest are uniform over the vocab.
const CLASS_BIAS: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Token id space; id 0 is reserved for the start-of-sequence slot and
    /// padding, so content ids are 1..vocab_size.
    pub vocab_size: usize,
    /// Positions per sample including the start-of-sequence slot.
    pub seq_len: usize,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_eval: usize,
    /// Train-label corruption probability; eval labels stay rule-exact.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> PipelineResult<()> {
        if self.num_classes < 2 {
            return Err(PipelineError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(PipelineError::InvalidConfig(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        // Every class needs at least one content token id.
        if self.vocab_size < self.num_classes + 1 {
            return Err(PipelineError::InvalidConfig(format!(
                "vocab_size {} cannot cover {} classes plus the reserved id 0",
                self.vocab_size, self.num_classes
            )));
        }
        // Slot 0 plus at least two content positions, so the token rule
        // always labels something.
        if self.seq_len < 3 {
            return Err(PipelineError::InvalidConfig(format!(
                "seq_len must be at least 3, got {}",
                self.seq_len
            )));
        }
        if self.num_train == 0 || self.num_eval == 0 {
            return Err(PipelineError::InvalidConfig(
                "num_train and num_eval must both be positive".into(),
            ));
        }
        Ok(())
    }

    fn min_content(&self) -> usize {
        ((self.seq_len - 1) / 2).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLabel {
    Sequence(usize),
    /// `None` marks positions the rule leaves unlabeled (slot 0, position
    /// 1 and padding).
    Token(Vec<Option<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assembles the samples at `indices` into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let rows: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let labels = match self.spec.kind {
            TaskKind::Sequence => Labels::PerSequence(
                rows.iter()
                    .map(|s| match &s.label {
                        SampleLabel::Sequence(c) => *c,
                        SampleLabel::Token(_) => unreachable!("kind checked at generation"),
                    })
                    .collect(),
            ),
            TaskKind::Token => Labels::PerToken(
                rows.iter()
                    .map(|s| match &s.label {
                        SampleLabel::Token(l) => l.clone(),
                        SampleLabel::Sequence(_) => unreachable!("kind checked at generation"),
                    })
                    .collect(),
            ),
        };
        Batch {
            token_ids: rows.iter().map(|s| s.tokens.clone()).collect(),
            attention_mask: rows.iter().map(|s| s.mask.clone()).collect(),
            labels,
        }
    }
}

/// Rule class of a content token id (id >= 1).
pub fn token_class(token: usize, num_classes: usize) -> usize {
    (token - 1) % num_classes
}

/// Planted sequence rule: majority class over unmasked content tokens,
/// ties toward the lowest class index.
pub fn rule_label(tokens: &[usize], mask: &[bool], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for (j, (&t, &m)) in tokens.iter().zip(mask).enumerate() {
        if j == 0 || !m {
            continue;
        }
        counts[token_class(t, num_classes)] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Planted token rule: position j is labeled `(id[j-1] + id[j]) mod
/// num_classes` for unmasked j >= 2; everything else is unlabeled.
pub fn rule_token_labels(
    tokens: &[usize],
    mask: &[bool],
    num_classes: usize,
) -> Vec<Option<usize>> {
    tokens
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(j, (&t, &m))| {
            if j < 2 || !m {
                None
            } else {
                Some((tokens[j - 1] + t) % num_classes)
            }
        })
        .collect()
}

/// Generates the train and eval splits for `spec`. Deterministic given the
/// spec; the two splits never share a token sequence; label noise touches
/// only the train split.
pub fn generate_task(spec: &SyntheticTaskSpec) -> PipelineResult<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for t in 1..spec.vocab_size {
        by_class[token_class(t, spec.num_classes)].push(t);
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let total = spec.num_train + spec.num_eval;
    let mut attempts_left = total.saturating_mul(100);
    let mut draw_tokens = |rng: &mut ChaCha8Rng| -> PipelineResult<(Vec<usize>, Vec<bool>)> {
        loop {
            if attempts_left == 0 {
                return Err(PipelineError::InvalidConfig(format!(
                    "task space too small for {} distinct samples \
                     (vocab_size {}, seq_len {})",
                    total, spec.vocab_size, spec.seq_len
                )));
            }
            attempts_left -= 1;
            let content = rng.gen_range(spec.min_content()..spec.seq_len);
            let target = rng.gen_range(0..spec.num_classes);
            let mut tokens = vec![0usize; spec.seq_len];
            let mut mask = vec![false; spec.seq_len];
            mask[0] = true;
            for j in 1..=content {
                tokens[j] = if rng.gen::<f64>() < CLASS_BIAS {
                    by_class[target][rng.gen_range(0..by_class[target].len())]
                } else {
                    rng.gen_range(1..spec.vocab_size)
                };
                mask[j] = true;
            }
            if seen.insert(tokens.clone()) {
                return Ok((tokens, mask));
            }
        }
    };

    let flip = |rng: &mut ChaCha8Rng, label: usize| -> usize {
        (label + 1 + rng.gen_range(0..spec.num_classes - 1)) % spec.num_classes
    };

    let mut splits = Vec::with_capacity(2);
    for (count, noisy) in [(spec.num_train, true), (spec.num_eval, false)] {
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let (tokens, mask) = draw_tokens(&mut rng)?;
            let label = match spec.kind {
                TaskKind::Sequence => {
                    let mut label = rule_label(&tokens, &mask, spec.num_classes);
                    if noisy && rng.gen::<f64>() < spec.noise_rate {
                        label = flip(&mut rng, label);
                    }
                    SampleLabel::Sequence(label)
                }
                TaskKind::Token => {
                    let mut labels = rule_token_labels(&tokens, &mask, spec.num_classes);
                    if noisy {
                        for slot in labels.iter_mut() {
                            if let Some(l) = slot {
                                if rng.gen::<f64>() < spec.noise_rate {
                                    *l = flip(&mut rng, *l);
                                }
                            }
                        }
                    }
                    SampleLabel::Token(labels)
                }
            };
            samples.push(Sample {
                tokens,
                mask,
                label,
            });
        }
        splits.push(Dataset {
            spec: spec.clone(),
            samples,
        });
    }
    let eval = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok((train, eval))
}
