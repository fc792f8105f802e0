//! Brute-force reference implementations of the distillation losses.
//!
//! Everything here works on plain nested `Vec<f64>` with naive loops and is
//! written independently of the tensor stack: no stabilized softmax, no
//! shared kernels, no graph. The point is cross-checking: the
//! differentiable losses in [`crate::distill`] must agree with these within
//! 1e-10 on toy instances, and the `losscheck` run kind enforces exactly
//! that.
//!
//! Conventions shared with the real losses (fixed by the loss definitions,
//! not by code): KL uses the 0·ln(0/q) = 0 convention with q clamped below
//! at 1e-12; masked query rows are excluded from row averages; per-sample
//! losses are averaged uniformly over the batch.

pub type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-stochastic relation matrix softmax(x xᵀ / sqrt(cols)), masked key
/// positions receiving probability zero.
fn relation(x: &Mat, mask: Option<&[bool]>) -> Mat {
    let n = x.len();
    let scale = (x[0].len() as f64).sqrt();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut denom = 0.0;
        let mut exps = vec![0.0; n];
        for j in 0..n {
            if mask.map_or(true, |m| m[j]) {
                exps[j] = (dot(&x[i], &x[j]) / scale).exp();
                denom += exps[j];
            }
        }
        for j in 0..n {
            out[i][j] = exps[j] / denom;
        }
    }
    out
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(EPS)).ln())
        .sum()
}

/// Mean over kept rows of row-wise KL between two relation matrices.
fn masked_row_kl_mean(p: &Mat, q: &Mat, keep: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..p.len() {
        if keep.map_or(true, |k| k[i]) {
            total += kl_row(&p[i], &q[i]);
            count += 1;
        }
    }
    total / count as f64
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Token-relation loss over embeddings: per sample, mean over kept rows of
/// KL between teacher and student token Gram softmax rows; batch mean.
pub fn emb_loss(e_t: &[Mat], e_s: &[Mat], masks: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for ((et, es), mask) in e_t.iter().zip(e_s).zip(masks) {
        let rt = relation(et, Some(mask));
        let rs = relation(es, Some(mask));
        total += masked_row_kl_mean(&rt, &rs, Some(mask));
    }
    total / e_t.len() as f64
}

/// Contiguous grouping of heads into `num_splits` groups, horizontally
/// concatenated within each group.
pub fn concat_split(heads: &[Mat], num_splits: usize) -> Vec<Mat> {
    let group = heads.len() / num_splits;
    let rows = heads[0].len();
    (0..num_splits)
        .map(|s| {
            (0..rows)
                .map(|i| {
                    let mut row = Vec::new();
                    for h in &heads[s * group..(s + 1) * group] {
                        row.extend_from_slice(&h[i]);
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Contiguous grouping with elementwise mean over each group.
pub fn average_split(heads: &[Mat], num_splits: usize) -> Vec<Mat> {
    let group = heads.len() / num_splits;
    let rows = heads[0].len();
    let cols = heads[0][0].len();
    (0..num_splits)
        .map(|s| {
            (0..rows)
                .map(|i| {
                    (0..cols)
                        .map(|j| {
                            heads[s * group..(s + 1) * group]
                                .iter()
                                .map(|h| h[i][j])
                                .sum::<f64>()
                                / group as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Contiguous grouping where group s contributes its member `picks[s]`.
pub fn pick_split(heads: &[Mat], num_splits: usize, picks: &[usize]) -> Vec<Mat> {
    let group = heads.len() / num_splits;
    (0..num_splits)
        .map(|s| heads[s * group + picks[s]].clone())
        .collect()
}

/// Attention-relation loss over pre-built splits. Index layout:
/// `t_splits[sample][mapped pair][split]`. Per sample and mapped pair the
/// split KLs (mean over kept rows) are averaged over splits; pair values
/// are summed; the result is averaged over the batch.
pub fn mha_loss(t_splits: &[Vec<Vec<Mat>>], s_splits: &[Vec<Vec<Mat>>], masks: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for ((ts, ss), mask) in t_splits.iter().zip(s_splits).zip(masks) {
        let mut sample = 0.0;
        for (tp, sp) in ts.iter().zip(ss) {
            let mut pair = 0.0;
            for (t, s) in tp.iter().zip(sp) {
                let rt = relation(t, Some(mask));
                let rs = relation(s, Some(mask));
                pair += masked_row_kl_mean(&rt, &rs, Some(mask));
            }
            sample += pair / tp.len() as f64;
        }
        total += sample;
    }
    total / t_splits.len() as f64
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for kk in 0..k {
            for j in 0..n {
                out[i][j] += a[i][kk] * b[kk][j];
            }
        }
    }
    out
}

/// Hidden-state loss: per sample, sum over mapped pairs of the masked MSE
/// between projected student hiddens and teacher hiddens; batch mean.
/// Index layout: `hidden[sample][mapped pair]`.
pub fn ffn_loss(t_hidden: &[Vec<Mat>], s_hidden: &[Vec<Mat>], w_h: &Mat, masks: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for ((th, sh), mask) in t_hidden.iter().zip(s_hidden).zip(masks) {
        let mut sample = 0.0;
        for (t, s) in th.iter().zip(sh) {
            let projected = mat_mul(s, w_h);
            let mut acc = 0.0;
            let mut rows = 0usize;
            for i in 0..t.len() {
                if mask[i] {
                    rows += 1;
                    for j in 0..t[0].len() {
                        let d = projected[i][j] - t[i][j];
                        acc += d * d;
                    }
                }
            }
            sample += acc / (rows * t[0].len()) as f64;
        }
        total += sample;
    }
    total / t_hidden.len() as f64
}

/// Sample-relation loss over pooled representations: mean over rows of KL
/// between the teacher and student b×b sample Gram softmax rows.
pub fn ss_loss(g_t: &Mat, g_s: &Mat) -> f64 {
    let rt = relation(g_t, None);
    let rs = relation(g_s, None);
    masked_row_kl_mean(&rt, &rs, None)
}

/// Supervised contrastive loss over the stacked student/teacher views.
/// H = [g_s·w_g ; g_t] with labels duplicated; optional row normalization;
/// per anchor with nonempty positive set, mean over positives of
/// -ln(exp(h_i·h_p/ρ) / Σ_{a≠i} exp(h_i·h_a/ρ)); mean over such anchors.
pub fn sc_loss(
    g_t: &Mat,
    g_s: &Mat,
    labels: &[usize],
    w_g: &Mat,
    rho: f64,
    normalize: bool,
) -> f64 {
    let mut h = mat_mul(g_s, w_g);
    h.extend(g_t.iter().cloned());
    if normalize {
        for row in h.iter_mut() {
            let norm = dot(row, row).sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    let n = h.len();
    let full: Vec<usize> = labels.iter().chain(labels.iter()).cloned().collect();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && full[j] == full[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dot(&h[i], &h[j]) / rho).exp())
            .sum();
        let mut term = 0.0;
        for &p in &positives {
            term += -((dot(&h[i], &h[p]) / rho).exp() / denom).ln();
        }
        total += term / positives.len() as f64;
        anchors += 1;
    }
    total / anchors as f64
}

/// Soft-label loss for sequence tasks: mean over batch rows of
/// KL(softmax(z_t/τ) || softmax(z_s/τ)).
pub fn kd_loss(z_t: &Mat, z_s: &Mat, tau: f64) -> f64 {
    let mut total = 0.0;
    for (t, s) in z_t.iter().zip(z_s) {
        let p = softmax_row(&t.iter().map(|v| v / tau).collect::<Vec<_>>());
        let q = softmax_row(&s.iter().map(|v| v / tau).collect::<Vec<_>>());
        total += kl_row(&p, &q);
    }
    total / z_t.len() as f64
}

/// Soft-label loss for token tasks: mean over every kept position of every
/// sample. Index layout: `z[sample][position]`.
pub fn kd_loss_token(z_t: &[Mat], z_s: &[Mat], tau: f64, masks: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((zt, zs), mask) in z_t.iter().zip(z_s).zip(masks) {
        for i in 0..zt.len() {
            if !mask[i] {
                continue;
            }
            let p = softmax_row(&zt[i].iter().map(|v| v / tau).collect::<Vec<_>>());
            let q = softmax_row(&zs[i].iter().map(|v| v / tau).collect::<Vec<_>>());
            total += kl_row(&p, &q);
            count += 1;
        }
    }
    total / count as f64
}
