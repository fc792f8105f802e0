use std::collections::HashSet;

use super::tensor::{Inner, Tensor};
use super::{NumResult, TensorError, KL_EPS};

pub(super) const LN_EPS: f64 = 1e-12;
pub(super) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(super) const GELU_K: f64 = 0.044_715;

/// One recorded operation. Holds handles to its inputs plus whatever
/// non-tensor context the backward rule needs. Output values live on the
/// node that owns the op, so no op ever references its own output.
pub(super) enum Op {
    MatMul { a: Tensor, b: Tensor },
    /// a × bᵀ
    MatMulNt { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Scale { x: Tensor, k: f64 },
    /// x + bias broadcast over rows; bias is 1×cols.
    AddBiasRow { x: Tensor, bias: Tensor },
    HConcat { parts: Vec<Tensor> },
    VConcat { parts: Vec<Tensor> },
    SliceRows { x: Tensor, start: usize },
    SliceCols { x: Tensor, start: usize },
    GatherRows { table: Tensor, ids: Vec<usize> },
    Gelu { x: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor },
    /// keep[j] == false zeroes probability at column j in every row.
    SoftmaxRows { x: Tensor },
    L2NormalizeRows { x: Tensor },
    SumAll { x: Tensor },
    /// keep[i] == false drops row i from the mean.
    KlDivRows { p: Tensor, q: Tensor, keep: Option<Vec<bool>> },
    MseMean { a: Tensor, b: Tensor, keep: Option<Vec<bool>> },
    CrossEntropyRows { logits: Tensor, labels: Vec<usize>, keep: Option<Vec<bool>> },
    SupConFromScores { scores: Tensor, labels: Vec<usize> },
}

// Plain accumulating matmul kernels over row-major slices.

/// out += a(m×k) · b(k×n)
pub(super) fn mm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a(m×k) · b(n×k)ᵀ
pub(super) fn mm_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a(k×m)ᵀ · b(k×n)
pub(super) fn mm_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn accum_if_trainable(t: &Tensor, contrib: &[f64]) {
    if t.requires_grad() {
        t.accumulate_grad(contrib);
    }
}

impl Op {
    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } | Op::Sub { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SoftmaxRows { x }
            | Op::L2NormalizeRows { x }
            | Op::SumAll { x } => vec![x.clone()],
            Op::AddBiasRow { x, bias } => vec![x.clone(), bias.clone()],
            Op::HConcat { parts } | Op::VConcat { parts } => parts.clone(),
            Op::GatherRows { table, .. } => vec![table.clone()],
            Op::LayerNorm { x, gamma, beta } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::KlDivRows { p, q, .. } => vec![p.clone(), q.clone()],
            Op::MseMean { a, b, .. } => vec![a.clone(), b.clone()],
            Op::CrossEntropyRows { logits, .. } => vec![logits.clone()],
            Op::SupConFromScores { scores, .. } => vec![scores.clone()],
        }
    }

    /// Routes the output gradient in `out.grad` to this op's inputs.
    /// `out` is the borrowed inner of the node that owns this op.
    fn backprop(&self, out: &Inner) {
        let g = out.grad.as_ref().expect("backprop on node without grad");
        match self {
            Op::MatMul { a, b } => {
                let (m, k) = a.shape();
                let n = b.cols();
                if a.requires_grad() {
                    let bd = b.0.borrow();
                    let mut da = vec![0.0; m * k];
                    mm_nt_acc(g, m, n, &bd.data, k, &mut da);
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.0.borrow();
                    let mut db = vec![0.0; k * n];
                    mm_tn_acc(&ad.data, m, k, g, n, &mut db);
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = a.shape();
                let n = b.rows();
                if a.requires_grad() {
                    let bd = b.0.borrow();
                    let mut da = vec![0.0; m * k];
                    mm_acc(g, m, n, &bd.data, k, &mut da);
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.0.borrow();
                    let mut db = vec![0.0; n * k];
                    mm_tn_acc(g, m, n, &ad.data, k, &mut db);
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            }
            Op::Add { a, b } => {
                accum_if_trainable(a, g);
                accum_if_trainable(b, g);
            }
            Op::Sub { a, b } => {
                accum_if_trainable(a, g);
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Scale { x, k } => {
                if x.requires_grad() {
                    let dx: Vec<f64> = g.iter().map(|v| k * v).collect();
                    x.accumulate_grad(&dx);
                }
            }
            Op::AddBiasRow { x, bias } => {
                accum_if_trainable(x, g);
                if bias.requires_grad() {
                    let cols = out.cols;
                    let mut db = vec![0.0; cols];
                    for i in 0..out.rows {
                        for j in 0..cols {
                            db[j] += g[i * cols + j];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            }
            Op::HConcat { parts } => {
                let cols = out.cols;
                let mut offset = 0;
                for part in parts {
                    let (pr, pc) = part.shape();
                    if part.requires_grad() {
                        let mut dp = vec![0.0; pr * pc];
                        for i in 0..pr {
                            dp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * cols + offset..i * cols + offset + pc]);
                        }
                        part.accumulate_grad(&dp);
                    }
                    offset += pc;
                }
            }
            Op::VConcat { parts } => {
                let cols = out.cols;
                let mut offset = 0;
                for part in parts {
                    let pr = part.rows();
                    if part.requires_grad() {
                        part.accumulate_grad(&g[offset * cols..(offset + pr) * cols]);
                    }
                    offset += pr;
                }
            }
            Op::SliceRows { x, start } => {
                if x.requires_grad() {
                    let (xr, xc) = x.shape();
                    let mut dx = vec![0.0; xr * xc];
                    dx[start * xc..start * xc + g.len()].copy_from_slice(g);
                    x.accumulate_grad(&dx);
                }
            }
            Op::SliceCols { x, start } => {
                if x.requires_grad() {
                    let (xr, xc) = x.shape();
                    let oc = out.cols;
                    let mut dx = vec![0.0; xr * xc];
                    for i in 0..xr {
                        dx[i * xc + start..i * xc + start + oc]
                            .copy_from_slice(&g[i * oc..(i + 1) * oc]);
                    }
                    x.accumulate_grad(&dx);
                }
            }
            Op::GatherRows { table, ids } => {
                if table.requires_grad() {
                    let (tr, tc) = table.shape();
                    let mut dt = vec![0.0; tr * tc];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            dt[id * tc + j] += g[i * tc + j];
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }
            Op::Gelu { x } => {
                if x.requires_grad() {
                    let xd = x.0.borrow();
                    let dx: Vec<f64> = xd
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let u = GELU_C * (v + GELU_K * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = x.shape();
                let xd = x.0.borrow();
                let gd = gamma.0.borrow();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for i in 0..rows {
                    let xrow = &xd.data[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mean = xrow.iter().sum::<f64>() / cols as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // xhat, dxhat, and the two reduction terms of the LN VJP
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for j in 0..cols {
                        xhat[j] = (xrow[j] - mean) * inv;
                        dxhat[j] = grow[j] * gd.data[j];
                        mean_dxh += dxhat[j];
                        mean_dxh_xh += dxhat[j] * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dxh /= cols as f64;
                    mean_dxh_xh /= cols as f64;
                    for j in 0..cols {
                        dx[i * cols + j] = inv * (dxhat[j] - mean_dxh - xhat[j] * mean_dxh_xh);
                    }
                }
                drop(xd);
                drop(gd);
                accum_if_trainable(x, &dx);
                accum_if_trainable(gamma, &dgamma);
                accum_if_trainable(beta, &dbeta);
            }
            Op::SoftmaxRows { x } => {
                if x.requires_grad() {
                    let (rows, cols) = (out.rows, out.cols);
                    let p = &out.data;
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let prow = &p[i * cols..(i + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[i * cols + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }
            Op::L2NormalizeRows { x } => {
                if x.requires_grad() {
                    let (rows, cols) = x.shape();
                    let xd = x.0.borrow();
                    let y = &out.data;
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let xrow = &xd.data[i * cols..(i + 1) * cols];
                        let yrow = &y[i * cols..(i + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[i * cols + j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                    drop(xd);
                    x.accumulate_grad(&dx);
                }
            }
            Op::SumAll { x } => {
                if x.requires_grad() {
                    let dx = vec![g[0]; x.numel()];
                    x.accumulate_grad(&dx);
                }
            }
            Op::KlDivRows { p, q, keep } => {
                let gv = g[0];
                let (rows, cols) = p.shape();
                let cnt = keep
                    .as_ref()
                    .map_or(rows, |k| k.iter().filter(|&&b| b).count()) as f64;
                let pd = p.0.borrow();
                let qd = q.0.borrow();
                let included = |i: usize| keep.as_ref().map_or(true, |k| k[i]);
                if p.requires_grad() {
                    let mut dp = vec![0.0; rows * cols];
                    for i in 0..rows {
                        if !included(i) {
                            continue;
                        }
                        for j in 0..cols {
                            let pv = pd.data[i * cols + j];
                            if pv > 0.0 {
                                let qc = qd.data[i * cols + j].max(KL_EPS);
                                dp[i * cols + j] = gv * ((pv / qc).ln() + 1.0) / cnt;
                            }
                        }
                    }
                    drop(pd);
                    p.accumulate_grad(&dp);
                } else {
                    drop(pd);
                }
                if q.requires_grad() {
                    let pd = p.0.borrow();
                    let mut dq = vec![0.0; rows * cols];
                    for i in 0..rows {
                        if !included(i) {
                            continue;
                        }
                        for j in 0..cols {
                            let qv = qd.data[i * cols + j];
                            // inside the clamp region the loss is locally constant in q
                            if qv > KL_EPS {
                                dq[i * cols + j] = -gv * pd.data[i * cols + j] / qv / cnt;
                            }
                        }
                    }
                    drop(pd);
                    drop(qd);
                    q.accumulate_grad(&dq);
                }
            }
            Op::MseMean { a, b, keep } => {
                let gv = g[0];
                let (rows, cols) = a.shape();
                let cnt_rows = keep
                    .as_ref()
                    .map_or(rows, |k| k.iter().filter(|&&b| b).count());
                let scale = 2.0 * gv / (cnt_rows * cols) as f64;
                let ad = a.0.borrow();
                let bd = b.0.borrow();
                let mut diff = vec![0.0; rows * cols];
                for i in 0..rows {
                    if let Some(k) = keep.as_ref() {
                        if !k[i] {
                            continue;
                        }
                    }
                    for j in 0..cols {
                        diff[i * cols + j] = scale * (ad.data[i * cols + j] - bd.data[i * cols + j]);
                    }
                }
                drop(ad);
                drop(bd);
                accum_if_trainable(a, &diff);
                if b.requires_grad() {
                    for v in diff.iter_mut() {
                        *v = -*v;
                    }
                    b.accumulate_grad(&diff);
                }
            }
            Op::CrossEntropyRows { logits, labels, keep } => {
                if logits.requires_grad() {
                    let gv = g[0];
                    let (rows, cols) = logits.shape();
                    let cnt = keep
                        .as_ref()
                        .map_or(rows, |k| k.iter().filter(|&&b| b).count())
                        as f64;
                    let ld = logits.0.borrow();
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        if let Some(k) = keep.as_ref() {
                            if !k[i] {
                                continue;
                            }
                        }
                        let row = &ld.data[i * cols..(i + 1) * cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..cols {
                            let soft = (row[j] - max).exp() / denom;
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            dx[i * cols + j] = gv * (soft - onehot) / cnt;
                        }
                    }
                    drop(ld);
                    logits.accumulate_grad(&dx);
                }
            }
            Op::SupConFromScores { scores, labels } => {
                if scores.requires_grad() {
                    let gv = g[0];
                    let n = scores.rows();
                    let sd = scores.0.borrow();
                    let mut anchors: Vec<(usize, Vec<usize>)> = Vec::new();
                    for i in 0..n {
                        let positives: Vec<usize> = (0..n)
                            .filter(|&j| j != i && labels[j] == labels[i])
                            .collect();
                        if !positives.is_empty() {
                            anchors.push((i, positives));
                        }
                    }
                    let kn = anchors.len() as f64;
                    let mut dx = vec![0.0; n * n];
                    for (i, positives) in &anchors {
                        let i = *i;
                        let row = &sd.data[i * n..(i + 1) * n];
                        let max = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| row[j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| (row[j] - max).exp())
                            .sum();
                        let inv_p = 1.0 / positives.len() as f64;
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let soft = (row[j] - max).exp() / denom;
                            let pos = if labels[j] == labels[i] { inv_p } else { 0.0 };
                            dx[i * n + j] += gv * (soft - pos) / kn;
                        }
                    }
                    drop(sd);
                    scores.accumulate_grad(&dx);
                }
            }
        }
    }
}

/// Postorder DFS from the root over nodes that carry recorded ops,
/// deduplicated by handle identity. Reversed, the order visits every node
/// before any of its inputs.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, processed)) = stack.pop() {
        if processed {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.0.borrow().op.as_ref() {
            for input in op.inputs() {
                // trainable leaves receive gradient but have nothing to replay
                if input.requires_grad() && input.0.borrow().op.is_some() {
                    stack.push((input, false));
                }
            }
        }
    }
    order
}

impl Tensor {
    /// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1,
    /// walks the recorded graph exactly once in reverse topological order,
    /// accumulating into every trainable leaf reachable from the loss, then
    /// consumes the graph. Gradients keep accumulating across separate
    /// backward calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> NumResult<()> {
        {
            let inner = self.0.borrow();
            if inner.rows != 1 || inner.cols != 1 {
                return Err(TensorError::BackwardNonScalar {
                    rows: inner.rows,
                    cols: inner.cols,
                });
            }
            if inner.spent {
                return Err(TensorError::BackwardTwice);
            }
            if inner.op.is_none() {
                return Err(TensorError::NoGraph);
            }
        }
        let order = topo_order(self);
        self.0.borrow_mut().grad = Some(vec![1.0]);
        for node in order.iter().rev() {
            let inner = node.0.borrow();
            if inner.grad.is_none() {
                continue;
            }
            if let Some(op) = inner.op.as_ref() {
                op.backprop(&inner);
            }
        }
        for node in &order {
            node.0.borrow_mut().op = None;
        }
        self.0.borrow_mut().spent = true;
        Ok(())
    }
}
