//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every primitive appends one node holding its output values, a zeroed
//! gradient buffer, and enough of the forward context to run its backward
//! rule. Nodes only ever reference earlier nodes, so walking the tape in
//! reverse id order is a reverse topological traversal. All loops are
//! sequential with a fixed reduction order, which makes forward passes
//! bit-deterministic for a fixed input and operation order.
//!
//! The tape works on rank-2 views: scalars are 1x1, vectors are 1xn.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddConst { x: NodeId },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Transpose { x: NodeId },
    Sum { x: NodeId },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// C = A(m x k) * B(k x n); `out` must be zeroed. ikj order keeps the inner
// loop contiguous in both B and C.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// C += A(m x n) * B(k x n)^T; inner loop is a dot product of two rows.
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

// C += A(m x k)^T * B(m x n); axpy of B rows into C rows.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, values.len());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        let n = &self.nodes[id.0];
        vec![n.rows, n.cols]
    }

    /// Record an input tensor (rank 1 or 2) as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        if t.rank() > 2 {
            return Err(Error::shape("tape leaf (rank must be <= 2)", t.shape(), &[]));
        }
        Ok(self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf))
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<NodeId> {
        if rows * cols != values.len() {
            return Err(Error::Contract(format!(
                "leaf matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    /// Standard matrix product; backward accumulates dA = dC*B^T, dB = A^T*dC.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape_of(a), &self.shape_of(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(m, n, out, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("add", &self.shape_of(a), &self.shape_of(b)));
        }
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(m, n, out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul", &self.shape_of(a), &self.shape_of(b)));
        }
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(m, n, out, Op::Mul { a, b }))
    }

    /// Broadcast a 1xn bias over the rows of an m x n matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        let (bm, bn) = self.dims(bias);
        if bm != 1 || bn != n {
            return Err(Error::shape(
                "add_bias",
                &self.shape_of(x),
                &self.shape_of(bias),
            ));
        }
        let b = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[x.0].values.chunks_exact(n) {
            for (v, bv) in row.iter().zip(b) {
                out.push(v + bv);
            }
        }
        Ok(self.push(m, n, out, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * factor).collect();
        self.push(m, n, out, Op::Scale { x, factor })
    }

    /// Add a constant matrix (same shape); the constant carries no gradient.
    pub fn add_const(&mut self, x: NodeId, constant: &[f64]) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if constant.len() != m * n {
            return Err(Error::shape("add_const", &self.shape_of(x), &[constant.len()]));
        }
        let out: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .zip(constant)
            .map(|(v, c)| v + c)
            .collect();
        Ok(self.push(m, n, out, Op::AddConst { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        self.push(m, n, out, Op::Relu { x })
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        let xs = &self.nodes[x.0].values;
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let base = out.len();
            for &v in row {
                let e = (v - mx).exp();
                out.push(e);
                sum += e;
            }
            for v in &mut out[base..] {
                *v /= sum;
            }
        }
        Ok(self.push(m, n, out, Op::SoftmaxRows { x }))
    }

    /// Normalize each row to mean 0 / variance 1, then apply gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gm, gn) = self.dims(id);
            if gm != 1 || gn != n {
                return Err(Error::shape(
                    format!("layer_norm {name}"),
                    &self.shape_of(x),
                    &self.shape_of(id),
                ));
            }
        }
        let xs = &self.nodes[x.0].values;
        let g = &self.nodes[gain.0].values;
        let b = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv * g[j] + b[j]);
            }
        }
        Ok(self.push(m, n, out, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "token id {id} out of range for table with {v} rows"
                )));
            }
        }
        let tv = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax of the target class per row; scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy: {m} logit rows but {} targets",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= v {
                return Err(Error::Index(format!(
                    "target class {t} out of range for {v} classes"
                )));
            }
        }
        let xs = &self.nodes[logits.0].values;
        if xs.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("cross_entropy input contains NaN".into()));
        }
        let mut probs = Vec::with_capacity(m * v);
        let mut loss = 0.0;
        for (row, &t) in xs.chunks_exact(v).zip(targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let base = probs.len();
            for &x in row {
                let e = (x - mx).exp();
                probs.push(e);
                sum += e;
            }
            for p in &mut probs[base..] {
                *p /= sum;
            }
            let lse = mx + sum.ln();
            loss += lse - row[t];
        }
        loss /= m as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if start + len > m || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {m} rows",
                start + len
            )));
        }
        let out = self.nodes[x.0].values[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of bounds for {n} cols",
                start + len
            )));
        }
        let xs = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(m * len);
        for row in xs.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let m = self.dims(parts[0]).0;
        let mut n_total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    &self.shape_of(parts[0]),
                    &self.shape_of(p),
                ));
            }
            n_total += pn;
        }
        let mut out = Vec::with_capacity(m * n_total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.dims(p);
                out.extend_from_slice(&self.nodes[p.0].values[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(m, n_total, out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let n = self.dims(parts[0]).1;
        let mut m_total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape(
                    "concat_rows",
                    &self.shape_of(parts[0]),
                    &self.shape_of(p),
                ));
            }
            m_total += pm;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(m_total, n, out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let xs = &self.nodes[x.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xs[i * n + j];
            }
        }
        self.push(n, m, out, Op::Transpose { x })
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        self.push(1, 1, vec![total], Op::Sum { x })
    }

    /// Propagate gradients from a scalar loss back to every reachable node.
    /// Gradients accumulate: calling backward twice doubles leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        // Each call runs a fresh pass over zeroed buffers and then folds the
        // previous accumulation back in; seeding the existing buffers would
        // double-count intermediate gradients on repeat calls.
        let saved: Vec<Vec<f64>> = self.nodes[..=loss.0]
            .iter_mut()
            .map(|n| std::mem::replace(&mut n.grad, vec![0.0; n.values.len()]))
            .collect();
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            self.step_backward(idx);
        }
        for (n, old) in self.nodes[..=loss.0].iter_mut().zip(saved) {
            for (g, o) in n.grad.iter_mut().zip(old) {
                *g += o;
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) {
        // Split off the current node so its inputs can be borrowed mutably.
        let (before, rest) = self.nodes.split_at_mut(idx);
        let node = &rest[0];
        let d = &node.grad;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (before[a.0].rows, before[a.0].cols);
                let n = cols;
                let (av, bv) = (before[a.0].values.clone(), before[b.0].values.clone());
                matmul_nt_acc(d, &bv, m, n, k, &mut before[a.0].grad);
                matmul_tn_acc(&av, d, m, k, n, &mut before[b.0].grad);
            }
            Op::Add { a, b } => {
                for (g, dv) in before[a.0].grad.iter_mut().zip(d) {
                    *g += dv;
                }
                for (g, dv) in before[b.0].grad.iter_mut().zip(d) {
                    *g += dv;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                for i in 0..d.len() {
                    let da = d[i] * before[b.0].values[i];
                    let db = d[i] * before[a.0].values[i];
                    before[a.0].grad[i] += da;
                    before[b.0].grad[i] += db;
                }
            }
            Op::AddBias { x, bias } => {
                for (g, dv) in before[x.0].grad.iter_mut().zip(d) {
                    *g += dv;
                }
                for drow in d.chunks_exact(cols) {
                    for (g, dv) in before[bias.0].grad.iter_mut().zip(drow) {
                        *g += dv;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                for (g, dv) in before[x.0].grad.iter_mut().zip(d) {
                    *g += f * dv;
                }
            }
            Op::AddConst { x } => {
                for (g, dv) in before[x.0].grad.iter_mut().zip(d) {
                    *g += dv;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                for i in 0..d.len() {
                    if before[x.0].values[i] > 0.0 {
                        before[x.0].grad[i] += d[i];
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let y = &node.values;
                let xg = &mut before[x.0].grad;
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &d[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        xg[r * cols + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let n = cols as f64;
                let g = before[gain.0].values.clone();
                let mut xhat = vec![0.0; cols];
                for r in 0..rows {
                    let dr = &d[r * cols..(r + 1) * cols];
                    let inv = {
                        let xr = &before[x.0].values[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        for (h, &v) in xhat.iter_mut().zip(xr) {
                            *h = (v - mean) * inv;
                        }
                        inv
                    };
                    // t = d .* gain; dx = inv * (t - mean(t) - xhat * mean(t .* xhat))
                    let mut t_mean = 0.0;
                    let mut tx_mean = 0.0;
                    for j in 0..cols {
                        let t = dr[j] * g[j];
                        t_mean += t;
                        tx_mean += t * xhat[j];
                        before[gain.0].grad[j] += dr[j] * xhat[j];
                        before[bias.0].grad[j] += dr[j];
                    }
                    t_mean /= n;
                    tx_mean /= n;
                    for j in 0..cols {
                        before[x.0].grad[j + r * cols] +=
                            inv * (dr[j] * g[j] - t_mean - xhat[j] * tx_mean);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tg = &mut before[table.0].grad;
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut tg[id * cols..(id + 1) * cols];
                    let src = &d[i * cols..(i + 1) * cols];
                    for (g, dv) in dst.iter_mut().zip(src) {
                        *g += dv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let dloss = d[0];
                let m = targets.len() as f64;
                let v = before[logits.0].cols;
                let lg = &mut before[logits.0].grad;
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        lg[i * v + j] += dloss * (probs[i * v + j] - onehot) / m;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let dst = &mut before[x.0].grad[start * cols..];
                for (g, dv) in dst.iter_mut().zip(d) {
                    *g += dv;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let src_cols = before[x.0].cols;
                for r in 0..rows {
                    for j in 0..cols {
                        before[x.0].grad[r * src_cols + start + j] += d[r * cols + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                for r in 0..rows {
                    let mut offset = 0;
                    for &p in &parts {
                        let pn = before[p.0].cols;
                        for j in 0..pn {
                            before[p.0].grad[r * pn + j] += d[r * cols + offset + j];
                        }
                        offset += pn;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for &p in &parts {
                    let len = before[p.0].values.len();
                    for (g, dv) in before[p.0].grad.iter_mut().zip(&d[offset..offset + len]) {
                        *g += dv;
                    }
                    offset += len;
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                // node is n x m of an m x n input
                let (n_out, m_out) = (rows, cols);
                for i in 0..n_out {
                    for j in 0..m_out {
                        before[x.0].grad[j * n_out + i] += d[i * m_out + j];
                    }
                }
            }
            Op::Sum { x } => {
                let dv = d[0];
                for g in before[x.0].grad.iter_mut() {
                    *g += dv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(tape: &mut Tape, rows: usize, cols: usize, vals: &[f64]) -> NodeId {
        tape.leaf_matrix(rows, cols, vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf2(&mut tape, 2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[1.0, 2.0]);
        let b = leaf2(&mut tape, 2, 1, &[3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 1, &[0.0]);
        let b = leaf2(&mut tape, 1, 1, &[7.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[1.0, 2.0]);
        let b = leaf2(&mut tape, 3, 1, &[1.0, 2.0, 3.0]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[0.0, 0.0]);
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let b = leaf2(&mut tape, 1, 2, &[1000.0, 1000.0]);
        let s2 = tape.softmax_rows(b).unwrap();
        assert_eq!(tape.value(s2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form_quarters() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[0.0, 3.0_f64.ln()]);
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 3, 4, &[0.3, -1.2, 8.0, 0.0, 2.0, 2.0, 2.0, 2.0, -5.0, 5.0, 0.1, 0.2]);
        let s = tape.softmax_rows(a).unwrap();
        for row in tape.value(s).chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, 1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax_rows(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_zero_variance_maps_to_bias() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 1, 3, &[1.0, 1.0, 1.0]);
        let g = leaf2(&mut tape, 1, 3, &[1.0, 1.0, 1.0]);
        let b = leaf2(&mut tape, 1, 3, &[0.0, 0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 1, 2, &[-1.0, 1.0]);
        let g = leaf2(&mut tape, 1, 2, &[1.0, 1.0]);
        let b = leaf2(&mut tape, 1, 2, &[0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.0).abs() < 1e-6);
        assert!((v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalize_then_affine() {
        // x=[0,2] -> xhat=[-1,1]; gain 2, bias 1 -> [-1, 3]
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 1, 2, &[0.0, 2.0]);
        let g = leaf2(&mut tape, 1, 2, &[2.0, 2.0]);
        let b = leaf2(&mut tape, 1, 2, &[1.0, 1.0]);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.0).abs() < 1e-6);
        assert!((v[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_mean_zero_var_one_before_affine() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, 2, 4, &[0.3, 9.0, -2.0, 0.7, 1.0, 2.0, 3.0, 4.0]);
        let g = leaf2(&mut tape, 1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let b = leaf2(&mut tape, 1, 4, &[0.0, 0.0, 0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).chunks_exact(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, 1, 2, &[0.0, 0.0]);
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss)[0] - 2.0_f64.ln()).abs() < 1e-12);

        let l2 = leaf2(&mut tape, 1, 2, &[100.0, 0.0]);
        let loss2 = tape.cross_entropy(l2, &[0]).unwrap();
        assert!(tape.value(loss2)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_quarter_probability() {
        // logits [0, ln 3], target 0: p0 = 1/4, loss = ln 4
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, 1, 2, &[0.0, 3.0_f64.ln()]);
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss)[0] - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, 1, 2, &[0.0, 0.0]);
        assert!(matches!(tape.cross_entropy(l, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = leaf2(&mut tape, 1, 5, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[1.0; 5]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(w^2), w = [2, -3] -> grad = [4, -6]
        let mut tape = Tape::new();
        let w = leaf2(&mut tape, 1, 2, &[2.0, -3.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[4.0, -6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = leaf2(&mut tape, 1, 2, &[1.0, 2.0]);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = leaf2(&mut tape, 1, 3, &[1.0, 1.0, 1.0]);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_backward_is_probs_minus_onehot_over_batch() {
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, 2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let loss = tape.cross_entropy(l, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l);
        // probs are 0.5 everywhere; batch of 2
        assert!((g[0] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[1] - 0.5 / 2.0).abs() < 1e-15);
        assert!((g[2] - 0.5 / 2.0).abs() < 1e-15);
        assert!((g[3] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf_matrix(2, 3, vec![0.1, -0.2, 0.33, 1.4, -2.5, 0.61])
                .unwrap();
            let b = tape
                .leaf_matrix(3, 2, vec![0.7, 0.8, -0.9, 1.0, 1.1, -1.2])
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            tape.value(s).to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
