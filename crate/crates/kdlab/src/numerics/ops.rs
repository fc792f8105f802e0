use super::graph::{mm_acc, mm_nt_acc, Op, GELU_C, GELU_K, LN_EPS};
use super::tensor::Tensor;
use super::{NumResult, TensorError, KL_EPS, PROB_ROW_TOL};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        a_rows: a.rows(),
        a_cols: a.cols(),
        b_rows: b.rows(),
        b_cols: b.cols(),
    }
}

fn any_grad(tensors: &[&Tensor]) -> bool {
    tensors.iter().any(|t| t.requires_grad())
}

/// Builds the output node, recording `op` only when gradients will flow.
fn node(rows: usize, cols: usize, data: Vec<f64>, rg: bool, op: impl FnOnce() -> Op) -> Tensor {
    if rg {
        Tensor::new(rows, cols, data, true, Some(op()))
    } else {
        Tensor::new(rows, cols, data, false, None)
    }
}

impl Tensor {
    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor) -> NumResult<Tensor> {
        let (m, k) = self.shape();
        let (br, n) = other.shape();
        if k != br {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.0.borrow();
            let b = other.0.borrow();
            mm_acc(&a.data, m, k, &b.data, n, &mut out);
        }
        let rg = any_grad(&[self, other]);
        Ok(node(m, n, out, rg, || Op::MatMul {
            a: self.clone(),
            b: other.clone(),
        }))
    }

    /// self × otherᵀ. Saves materializing transposes for Gram matrices and
    /// attention scores.
    pub fn matmul_nt(&self, other: &Tensor) -> NumResult<Tensor> {
        let (m, k) = self.shape();
        let (n, bc) = other.shape();
        if k != bc {
            return Err(shape_err("matmul_nt", self, other));
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.0.borrow();
            let b = other.0.borrow();
            mm_nt_acc(&a.data, m, k, &b.data, n, &mut out);
        }
        let rg = any_grad(&[self, other]);
        Ok(node(m, n, out, rg, || Op::MatMulNt {
            a: self.clone(),
            b: other.clone(),
        }))
    }

    pub fn add(&self, other: &Tensor) -> NumResult<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        let (r, c) = self.shape();
        let data = {
            let a = self.0.borrow();
            let b = other.0.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
        };
        let rg = any_grad(&[self, other]);
        Ok(node(r, c, data, rg, || Op::Add {
            a: self.clone(),
            b: other.clone(),
        }))
    }

    pub fn sub(&self, other: &Tensor) -> NumResult<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("sub", self, other));
        }
        let (r, c) = self.shape();
        let data = {
            let a = self.0.borrow();
            let b = other.0.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect()
        };
        let rg = any_grad(&[self, other]);
        Ok(node(r, c, data, rg, || Op::Sub {
            a: self.clone(),
            b: other.clone(),
        }))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let (r, c) = self.shape();
        let data = self.0.borrow().data.iter().map(|x| k * x).collect();
        node(r, c, data, self.requires_grad(), || Op::Scale {
            x: self.clone(),
            k,
        })
    }

    /// Adds a 1×cols bias to every row.
    pub fn add_bias_row(&self, bias: &Tensor) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        if bias.rows() != 1 || bias.cols() != c {
            return Err(shape_err("add_bias_row", self, bias));
        }
        let data = {
            let x = self.0.borrow();
            let b = bias.0.borrow();
            let mut out = x.data.clone();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += b.data[j];
                }
            }
            out
        };
        let rg = any_grad(&[self, bias]);
        Ok(node(r, c, data, rg, || Op::AddBiasRow {
            x: self.clone(),
            bias: bias.clone(),
        }))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        if start + len > r || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let data = self.0.borrow().data[start * c..(start + len) * c].to_vec();
        Ok(node(len, c, data, self.requires_grad(), || Op::SliceRows {
            x: self.clone(),
            start,
        }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let data = {
            let x = self.0.borrow();
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
            }
            out
        };
        Ok(node(r, len, data, self.requires_grad(), || Op::SliceCols {
            x: self.clone(),
            start,
        }))
    }

    /// Row lookup: output row i is `self` row `ids[i]`. Duplicate ids are
    /// fine; their gradients accumulate on the shared row.
    pub fn gather_rows(&self, ids: &[usize]) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    limit: r,
                });
            }
        }
        let data = {
            let x = self.0.borrow();
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                out.extend_from_slice(&x.data[id * c..(id + 1) * c]);
            }
            out
        };
        Ok(node(ids.len(), c, data, self.requires_grad(), || {
            Op::GatherRows {
                table: self.clone(),
                ids: ids.to_vec(),
            }
        }))
    }

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&self) -> Tensor {
        let (r, c) = self.shape();
        let data = self
            .0
            .borrow()
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        node(r, c, data, self.requires_grad(), || Op::Gelu { x: self.clone() })
    }

    /// Row-wise layer normalization with learnable 1×cols scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        if gamma.rows() != 1 || gamma.cols() != c {
            return Err(shape_err("layer_norm", self, gamma));
        }
        if beta.rows() != 1 || beta.cols() != c {
            return Err(shape_err("layer_norm", self, beta));
        }
        let data = {
            let x = self.0.borrow();
            let gm = gamma.0.borrow();
            let bt = beta.0.borrow();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * inv * gm.data[j] + bt.data[j];
                }
            }
            out
        };
        let rg = any_grad(&[self, gamma, beta]);
        Ok(node(r, c, data, rg, || Op::LayerNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
        }))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Tensor {
        self.softmax_rows_masked(None)
            .expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax where `keep[j] == false` forces probability 0 at
    /// column j in every row (the masked-key convention). Masked columns
    /// also receive zero gradient.
    pub fn softmax_rows_masked(&self, keep: Option<&[bool]>) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        if let Some(k) = keep {
            if k.len() != c {
                return Err(TensorError::Dimension {
                    op: "softmax_rows",
                    msg: format!("mask length {} != {} columns", k.len(), c),
                });
            }
            if !k.iter().any(|&b| b) {
                return Err(TensorError::Dimension {
                    op: "softmax_rows",
                    msg: "every key position is masked".into(),
                });
            }
        }
        let data = {
            let x = self.0.borrow();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let mut max = f64::NEG_INFINITY;
                for j in 0..c {
                    if keep.map_or(true, |k| k[j]) && row[j] > max {
                        max = row[j];
                    }
                }
                let mut denom = 0.0;
                for j in 0..c {
                    if keep.map_or(true, |k| k[j]) {
                        let e = (row[j] - max).exp();
                        out[i * c + j] = e;
                        denom += e;
                    }
                }
                for j in 0..c {
                    out[i * c + j] /= denom;
                }
            }
            out
        };
        // Masked columns need no record in the op: their probability is zero,
        // and the softmax VJP p * (g - sum(p * g)) vanishes wherever p does.
        Ok(node(r, c, data, self.requires_grad(), || Op::SoftmaxRows {
            x: self.clone(),
        }))
    }

    /// Scales each row to unit Euclidean norm; degenerate rows are an error.
    pub fn l2_normalize_rows(&self) -> NumResult<Tensor> {
        let (r, c) = self.shape();
        let data = {
            let x = self.0.borrow();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(TensorError::DegenerateRow {
                        op: "l2_normalize_rows",
                        row: i,
                    });
                }
                for j in 0..c {
                    out[i * c + j] = row[j] / norm;
                }
            }
            out
        };
        Ok(node(r, c, data, self.requires_grad(), || {
            Op::L2NormalizeRows { x: self.clone() }
        }))
    }

    /// Sum of every element, as a 1×1 tensor.
    pub fn sum_all(&self) -> Tensor {
        let total = self.0.borrow().data.iter().sum();
        node(1, 1, vec![total], self.requires_grad(), || Op::SumAll {
            x: self.clone(),
        })
    }
}

/// Horizontal concatenation; all parts must share a row count.
pub fn hconcat(parts: &[Tensor]) -> NumResult<Tensor> {
    let first = parts.first().ok_or(TensorError::Dimension {
        op: "hconcat",
        msg: "empty part list".into(),
    })?;
    let rows = first.rows();
    let mut cols = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(shape_err("hconcat", first, p));
        }
        cols += p.cols();
    }
    let mut data = vec![0.0; rows * cols];
    let mut offset = 0;
    for p in parts {
        let pc = p.cols();
        let pd = p.0.borrow();
        for i in 0..rows {
            data[i * cols + offset..i * cols + offset + pc]
                .copy_from_slice(&pd.data[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(node(rows, cols, data, rg, || Op::HConcat {
        parts: parts.to_vec(),
    }))
}

/// Vertical concatenation; all parts must share a column count.
pub fn vconcat(parts: &[Tensor]) -> NumResult<Tensor> {
    let first = parts.first().ok_or(TensorError::Dimension {
        op: "vconcat",
        msg: "empty part list".into(),
    })?;
    let cols = first.cols();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(shape_err("vconcat", first, p));
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.0.borrow().data);
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(node(rows, cols, data, rg, || Op::VConcat {
        parts: parts.to_vec(),
    }))
}

fn validate_prob_rows(t: &Tensor, side: &'static str, keep: Option<&[bool]>) -> NumResult<()> {
    let (r, c) = t.shape();
    let inner = t.0.borrow();
    for i in 0..r {
        if let Some(k) = keep {
            if !k[i] {
                continue;
            }
        }
        let sum: f64 = inner.data[i * c..(i + 1) * c].iter().sum();
        if (sum - 1.0).abs() > PROB_ROW_TOL {
            return Err(TensorError::NotProbabilityRow { side, row: i, sum });
        }
    }
    Ok(())
}

/// Mean over rows of the row-wise KL divergence sum_j p ln(p/q), with the
/// 0·ln(0/q) = 0 convention and q clamped below at [`KL_EPS`] inside the
/// log. Both inputs must be row-stochastic.
pub fn kl_div_rows(p: &Tensor, q: &Tensor) -> NumResult<Tensor> {
    kl_div_rows_masked(p, q, None)
}

/// [`kl_div_rows`] restricted to rows with `keep[i] == true`; excluded rows
/// contribute neither to the mean nor to gradients.
pub fn kl_div_rows_masked(p: &Tensor, q: &Tensor, keep: Option<&[bool]>) -> NumResult<Tensor> {
    if p.shape() != q.shape() {
        return Err(shape_err("kl_div_rows", p, q));
    }
    let (r, c) = p.shape();
    if let Some(k) = keep {
        if k.len() != r {
            return Err(TensorError::Dimension {
                op: "kl_div_rows",
                msg: format!("mask length {} != {} rows", k.len(), r),
            });
        }
    }
    let cnt = keep.map_or(r, |k| k.iter().filter(|&&b| b).count());
    if cnt == 0 {
        return Err(TensorError::Dimension {
            op: "kl_div_rows",
            msg: "every row is masked".into(),
        });
    }
    validate_prob_rows(p, "p", keep)?;
    validate_prob_rows(q, "q", keep)?;
    let total = {
        let pd = p.0.borrow();
        let qd = q.0.borrow();
        let mut acc = 0.0;
        for i in 0..r {
            if let Some(k) = keep {
                if !k[i] {
                    continue;
                }
            }
            for j in 0..c {
                let pv = pd.data[i * c + j];
                if pv > 0.0 {
                    acc += pv * (pv / qd.data[i * c + j].max(KL_EPS)).ln();
                }
            }
        }
        acc / cnt as f64
    };
    let rg = any_grad(&[p, q]);
    Ok(node(1, 1, vec![total], rg, || Op::KlDivRows {
        p: p.clone(),
        q: q.clone(),
        keep: keep.map(|k| k.to_vec()),
    }))
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> NumResult<Tensor> {
    mse_masked(a, b, None)
}

/// [`mse`] over the elements of rows with `keep[i] == true` only.
pub fn mse_masked(a: &Tensor, b: &Tensor, keep: Option<&[bool]>) -> NumResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", a, b));
    }
    let (r, c) = a.shape();
    if let Some(k) = keep {
        if k.len() != r {
            return Err(TensorError::Dimension {
                op: "mse",
                msg: format!("mask length {} != {} rows", k.len(), r),
            });
        }
    }
    let cnt = keep.map_or(r, |k| k.iter().filter(|&&b| b).count());
    if cnt == 0 || c == 0 {
        return Err(TensorError::Dimension {
            op: "mse",
            msg: "no elements to average".into(),
        });
    }
    let total = {
        let ad = a.0.borrow();
        let bd = b.0.borrow();
        let mut acc = 0.0;
        for i in 0..r {
            if let Some(k) = keep {
                if !k[i] {
                    continue;
                }
            }
            for j in 0..c {
                let d = ad.data[i * c + j] - bd.data[i * c + j];
                acc += d * d;
            }
        }
        acc / (cnt * c) as f64
    };
    let rg = any_grad(&[a, b]);
    Ok(node(1, 1, vec![total], rg, || Op::MseMean {
        a: a.clone(),
        b: b.clone(),
        keep: keep.map(|k| k.to_vec()),
    }))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`, restricted to kept rows. Label values of excluded rows are
/// ignored.
pub fn cross_entropy_rows(
    logits: &Tensor,
    labels: &[usize],
    keep: Option<&[bool]>,
) -> NumResult<Tensor> {
    let (r, c) = logits.shape();
    if labels.len() != r {
        return Err(TensorError::Dimension {
            op: "cross_entropy_rows",
            msg: format!("{} labels for {} rows", labels.len(), r),
        });
    }
    if let Some(k) = keep {
        if k.len() != r {
            return Err(TensorError::Dimension {
                op: "cross_entropy_rows",
                msg: format!("mask length {} != {} rows", k.len(), r),
            });
        }
    }
    let cnt = keep.map_or(r, |k| k.iter().filter(|&&b| b).count());
    if cnt == 0 {
        return Err(TensorError::Dimension {
            op: "cross_entropy_rows",
            msg: "every row is masked".into(),
        });
    }
    let total = {
        let ld = logits.0.borrow();
        let mut acc = 0.0;
        for i in 0..r {
            if let Some(k) = keep {
                if !k[i] {
                    continue;
                }
            }
            if labels[i] >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: labels[i],
                    limit: c,
                });
            }
            let row = &ld.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            acc += lse - row[labels[i]];
        }
        acc / cnt as f64
    };
    Ok(node(1, 1, vec![total], logits.requires_grad(), || {
        Op::CrossEntropyRows {
            logits: logits.clone(),
            labels: labels.to_vec(),
            keep: keep.map(|k| k.to_vec()),
        }
    }))
}

/// Supervised contrastive loss over a square matrix of similarity scores
/// (temperature already applied). Row i is anchor i; candidates A(i) are
/// all j != i; positives P(i) share labels[i]. Per anchor the loss is the
/// mean over positives of -ln softmax_{A(i)}(score)_p, averaged over
/// anchors with nonempty P(i). Anchors with empty P(i) are skipped; if all
/// are empty that is an error.
pub fn supcon_from_scores(scores: &Tensor, labels: &[usize]) -> NumResult<Tensor> {
    let (n, c) = scores.shape();
    if n != c {
        return Err(TensorError::Dimension {
            op: "supcon_from_scores",
            msg: format!("scores must be square, got {}x{}", n, c),
        });
    }
    if labels.len() != n {
        return Err(TensorError::Dimension {
            op: "supcon_from_scores",
            msg: format!("{} labels for {} rows", labels.len(), n),
        });
    }
    if n < 2 {
        return Err(TensorError::Dimension {
            op: "supcon_from_scores",
            msg: "need at least two rows".into(),
        });
    }
    let total = {
        let sd = scores.0.borrow();
        let mut acc = 0.0;
        let mut anchors = 0usize;
        for i in 0..n {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            anchors += 1;
            let row = &sd.data[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            let mean_pos: f64 =
                positives.iter().map(|&p| row[p]).sum::<f64>() / positives.len() as f64;
            acc += lse - mean_pos;
        }
        if anchors == 0 {
            return Err(TensorError::NoPositivePairs);
        }
        acc / anchors as f64
    };
    Ok(node(1, 1, vec![total], scores.requires_grad(), || {
        Op::SupConFromScores {
            scores: scores.clone(),
            labels: labels.to_vec(),
        }
    }))
}
