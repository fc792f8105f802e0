//! Inference timing: median and standard deviation of wall-clock per
//! batch, after warm-up passes. Report-only; nothing asserts on absolute
//! times since they are hardware-bound.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, Labels, Model, ModelConfig, TaskKind};

use super::{PipelineError, PipelineResult};

/// Batch sizes reported by the standard benchmark.
pub const BENCH_BATCH_SIZES: [usize; 4] = [1, 16, 32, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub batch_size: usize,
    pub reps: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub std_ms: f64,
}

fn synth_batch(config: &ModelConfig, batch_size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let len = config.max_seq_len;
    let mut token_ids = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut ids = vec![0usize; len];
        for slot in ids.iter_mut().skip(1) {
            *slot = rng.gen_range(1..config.vocab_size);
        }
        token_ids.push(ids);
    }
    let labels = match config.task_kind {
        TaskKind::Sequence => Labels::PerSequence(vec![0; batch_size]),
        TaskKind::Token => Labels::PerToken(vec![vec![None; len]; batch_size]),
    };
    Batch {
        token_ids,
        attention_mask: vec![vec![true; len]; batch_size],
        labels,
    }
}

/// Times full-length forward passes at each batch size: `warmup` unmeasured
/// passes, then `reps` measured ones. Inputs are seed-deterministic; the
/// timings of course are not.
pub fn benchmark_inference(
    model: &Model,
    batch_sizes: &[usize],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> PipelineResult<Vec<TimingRecord>> {
    if reps == 0 {
        return Err(PipelineError::InvalidConfig(
            "benchmark needs at least one repetition".into(),
        ));
    }
    if model.config.vocab_size < 2 {
        return Err(PipelineError::InvalidConfig(
            "benchmark needs at least one non-reserved token id".into(),
        ));
    }
    let frozen = model.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &batch_size in batch_sizes {
        if batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch sizes must be positive".into(),
            ));
        }
        let batch = synth_batch(&frozen.config, batch_size, &mut rng);
        for _ in 0..warmup {
            frozen.encoder_forward(&batch)?;
        }
        let mut times_ms = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            frozen.encoder_forward(&batch)?;
            times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times_ms.sort_by(f64::total_cmp);
        let median_ms = if reps % 2 == 1 {
            times_ms[reps / 2]
        } else {
            (times_ms[reps / 2 - 1] + times_ms[reps / 2]) / 2.0
        };
        let mean = times_ms.iter().sum::<f64>() / reps as f64;
        let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
        out.push(TimingRecord {
            batch_size,
            reps,
            warmup,
            median_ms,
            std_ms: var.sqrt(),
        });
    }
    Ok(out)
}
