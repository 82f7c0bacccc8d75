use super::gemm::gemm;
use super::{check_finite, AdResult, AutodiffError, Node, Tape, Value};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Cos,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, trans_b: bool },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Unary { a: usize, kind: Unary },
    Softmax { a: usize, width: usize },
    CrossEntropy { probs: usize, labels: Vec<usize>, classes: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, width: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanGroups { a: usize, group: usize, width: usize },
    Concat { a: usize, b: usize, p: usize, q: usize },
    Gather { table: usize, idx: Vec<usize>, width: usize },
    Dropout { a: usize, mask: Vec<f64> },
    SplitHeads { a: usize, batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { a: usize, batch: usize, seq: usize, heads: usize, head_dim: usize },
    SumAll { a: usize },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

/// `b` broadcasts against `a` when the shapes are equal or `b`'s shape is a
/// trailing suffix of `a`'s.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Tape {
    fn rg(&self, vs: &[Value]) -> bool {
        vs.iter().any(|&v| self.node(v).requires_grad)
    }

    fn finish(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Value]) -> AdResult<Value> {
        check_finite(op_name, &data)?;
        let rg = self.rg(inputs);
        Ok(self.push(shape, data, op, rg))
    }

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&mut self, a: Value, b: Value) -> AdResult<Value> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `a` m×k and `b` n×k; the layout of a linear layer
    /// weight stored as out×in.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> AdResult<Value> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Value, b: Value, trans_b: bool) -> AdResult<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, 0.0, &mut out);
        self.finish("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n, trans_b }, &[a, b])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`).
    pub fn batch_matmul(&mut self, a: Value, b: Value, trans_b: bool) -> AdResult<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[t * m * k..(t + 1) * m * k],
                false,
                &db[t * k * n..(t + 1) * k * n],
                trans_b,
                0.0,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let op = Op::BatchMatMul { a: a.0, b: b.0, batch, m, k, n, trans_b };
        self.finish("batch_matmul", vec![batch, m, n], out, op, &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Value, b: Value, f: impl Fn(f64, f64) -> f64) -> AdResult<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out: Vec<f64> = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        let op = match name {
            "add" => Op::Add { a: a.0, b: b.0 },
            "sub" => Op::Sub { a: a.0, b: b.0 },
            _ => Op::Mul { a: a.0, b: b.0 },
        };
        let shape = sa.to_vec();
        self.finish(name, shape, out, op, &[a, b])
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Value, b: Value) -> AdResult<Value> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> AdResult<Value> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> AdResult<Value> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> AdResult<Value> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.finish("scale", shape, out, Op::Scale { a: a.0, c }, &[a])
    }

    pub fn unary(&mut self, a: Value, kind: Unary) -> AdResult<Value> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(0.0),
        };
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let name = match kind {
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
        };
        self.finish(name, shape, out, Op::Unary { a: a.0, kind }, &[a])
    }

    pub fn sin(&mut self, a: Value) -> AdResult<Value> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Value) -> AdResult<Value> {
        self.unary(a, Unary::Cos)
    }

    pub fn sigmoid(&mut self, a: Value) -> AdResult<Value> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Value) -> AdResult<Value> {
        self.unary(a, Unary::Relu)
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Value) -> AdResult<Value> {
        let shape = self.shape(a).to_vec();
        let width = last_dim(&shape);
        if width == 0 {
            return Err(AutodiffError::InvalidArgument { op: "softmax_rows", message: "zero classes".into() });
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.finish("softmax_rows", shape, out, Op::Softmax { a: a.0, width }, &[a])
    }

    /// Mean negative log-likelihood of `labels` under row distributions
    /// `probs`. When `probs` comes straight from [`Tape::softmax_rows`], the
    /// loss is evaluated from the logits (log-sum-exp) and the backward pass
    /// sends `(p − onehot)/n` directly to the logits.
    pub fn cross_entropy(&mut self, probs: Value, labels: &[usize]) -> AdResult<Value> {
        let shape = self.shape(probs).to_vec();
        let classes = last_dim(&shape);
        let rows = self.data(probs).len() / classes.max(1);
        if labels.len() != rows {
            return Err(mismatch("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: bad, bound: classes });
        }
        let node = self.node(probs);
        let mut total = 0.0;
        if let Op::Softmax { a: logits, .. } = node.op {
            let z = &self.nodes[logits].data;
            for (i, &y) in labels.iter().enumerate() {
                let row = &z[i * classes..(i + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
        } else {
            let p = &node.data;
            for (i, &y) in labels.iter().enumerate() {
                total -= p[i * classes + y].ln();
            }
        }
        let loss = total / rows as f64;
        let op = Op::CrossEntropy { probs: probs.0, labels: labels.to_vec(), classes };
        self.finish("cross_entropy", vec![1], vec![loss], op, &[probs])
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> AdResult<Value> {
        let shape = self.shape(x).to_vec();
        let width = last_dim(&shape);
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(AutodiffError::InvalidArgument { op: "layer_norm", message: format!("eps must be positive, got {eps}") });
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / width;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + b[j];
            }
        }
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, width, xhat, inv_std };
        self.finish("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Mean over consecutive blocks of `group` rows: `[G·group, w] -> [G, w]`.
    pub fn mean_row_groups(&mut self, a: Value, group: usize) -> AdResult<Value> {
        let shape = self.shape(a).to_vec();
        let width = last_dim(&shape);
        let rows = self.data(a).len() / width.max(1);
        if group == 0 || rows % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_row_groups",
                message: format!("{rows} rows do not split into groups of {group}"),
            });
        }
        let groups = rows / group;
        let da = self.data(a);
        let mut out = vec![0.0; groups * width];
        for r in 0..rows {
            let o = &mut out[(r / group) * width..(r / group + 1) * width];
            for (acc, v) in o.iter_mut().zip(&da[r * width..(r + 1) * width]) {
                *acc += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.finish("mean_row_groups", vec![groups, width], out, Op::MeanGroups { a: a.0, group, width }, &[a])
    }

    /// Column means of an `M×d` matrix, returned with shape `[d]`.
    pub fn reduce_mean_axis0(&mut self, a: Value) -> AdResult<Value> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(AutodiffError::InvalidArgument { op: "reduce_mean_axis0", message: format!("need M×d with M ≥ 1, got {shape:?}") });
        }
        let v = self.mean_row_groups(a, shape[0])?;
        self.nodes[v.0].shape = vec![shape[1]];
        Ok(v)
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Value, b: Value) -> AdResult<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (p, q) = (last_dim(&sa), last_dim(&sb));
        let rows = if p > 0 { self.data(a).len() / p } else { self.data(b).len() / q.max(1) };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        self.finish("concat_last", shape, out, Op::Concat { a: a.0, b: b.0, p, q }, &[a, b])
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Value, idx: &[usize]) -> AdResult<Value> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather_rows", &shape, &[idx.len()]));
        }
        let (n, width) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: bad, bound: n });
        }
        let dt = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&dt[i * width..(i + 1) * width]);
        }
        let op = Op::Gather { table: table.0, idx: idx.to_vec(), width };
        self.finish("gather_rows", vec![idx.len(), width], out, op, &[table])
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout(&mut self, a: Value, rate: f64, rng: &mut Rng, training: bool) -> AdResult<Value> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument { op: "dropout", message: format!("rate must lie in [0, 1), got {rate}") });
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.data(a).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.finish("dropout", shape, out, Op::Dropout { a: a.0, mask }, &[a])
    }

    /// `[batch·seq, heads·hd] -> [batch·heads, seq, hd]`.
    pub fn split_heads(&mut self, a: Value, batch: usize, seq: usize, heads: usize) -> AdResult<Value> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || shape[1] % heads != 0 {
            return Err(mismatch("split_heads", &shape, &[batch, seq, heads]));
        }
        let hd = shape[1] / heads;
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * heads * hd + h * hd;
                    let dst = ((b * heads + h) * seq + s) * hd;
                    out[dst..dst + hd].copy_from_slice(&da[src..src + hd]);
                }
            }
        }
        let op = Op::SplitHeads { a: a.0, batch, seq, heads, head_dim: hd };
        self.finish("split_heads", vec![batch * heads, seq, hd], out, op, &[a])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Value, batch: usize, heads: usize) -> AdResult<Value> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(mismatch("merge_heads", &shape, &[batch, heads]));
        }
        let (seq, hd) = (shape[1], shape[2]);
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + s) * heads * hd + h * hd;
                    let src = ((b * heads + h) * seq + s) * hd;
                    out[dst..dst + hd].copy_from_slice(&da[src..src + hd]);
                }
            }
        }
        let op = Op::MergeHeads { a: a.0, batch, seq, heads, head_dim: hd };
        self.finish("merge_heads", vec![batch * seq, heads * hd], out, op, &[a])
    }

    pub fn sum_all(&mut self, a: Value) -> AdResult<Value> {
        let s = self.data(a).iter().sum();
        self.finish("sum_all", vec![1], vec![s], Op::SumAll { a: a.0 }, &[a])
    }
}

fn accumulate(nodes: &mut [Node], idx: usize, contrib: &[f64]) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    for (g, c) in node.grad_mut().iter_mut().zip(contrib) {
        *g += c;
    }
}

/// Accumulate a broadcast operand's gradient by summing over repeats.
fn accumulate_broadcast(nodes: &mut [Node], idx: usize, full: &[f64]) {
    let n = nodes[idx].data.len();
    if n == full.len() {
        accumulate(nodes, idx, full);
        return;
    }
    let mut folded = vec![0.0; n];
    for (i, v) in full.iter().enumerate() {
        folded[i % n] += v;
    }
    accumulate(nodes, idx, &folded);
}

/// Propagate the output gradient `g` of `node` into its inputs, which all
/// live in `before` (their indices are smaller than the node's).
pub(crate) fn backward_node(node: &Node, g: &[f64], before: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n, trans_b } => {
            if before[a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &before[b].data, !trans_b, 0.0, &mut ga);
                accumulate(before, a, &ga);
            }
            if before[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                if trans_b {
                    gemm(n, m, k, g, true, &before[a].data, false, 0.0, &mut gb);
                } else {
                    gemm(k, m, n, &before[a].data, true, g, false, 0.0, &mut gb);
                }
                accumulate(before, b, &gb);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            if before[a].requires_grad {
                let mut ga = vec![0.0; batch * m * k];
                let db = &before[b].data;
                for t in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &db[t * k * n..(t + 1) * k * n],
                        !trans_b,
                        0.0,
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
                accumulate(before, a, &ga);
            }
            if before[b].requires_grad {
                let mut gb = vec![0.0; batch * k * n];
                let da = &before[a].data;
                for t in 0..batch {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let das = &da[t * m * k..(t + 1) * m * k];
                    let out = &mut gb[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, gs, true, das, false, 0.0, out);
                    } else {
                        gemm(k, m, n, das, true, gs, false, 0.0, out);
                    }
                }
                accumulate(before, b, &gb);
            }
        }
        &Op::Add { a, b } => {
            accumulate(before, a, g);
            if before[b].requires_grad {
                accumulate_broadcast(before, b, g);
            }
        }
        &Op::Sub { a, b } => {
            accumulate(before, a, g);
            if before[b].requires_grad {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate_broadcast(before, b, &neg);
            }
        }
        &Op::Mul { a, b } => {
            let nb = before[b].data.len();
            let ga: Option<Vec<f64>> = before[a].requires_grad.then(|| {
                let db = &before[b].data;
                g.iter().enumerate().map(|(i, v)| v * db[i % nb]).collect()
            });
            let gb: Option<Vec<f64>> = before[b].requires_grad.then(|| {
                let da = &before[a].data;
                g.iter().zip(da).map(|(v, x)| v * x).collect()
            });
            if let Some(ga) = ga {
                accumulate(before, a, &ga);
            }
            if let Some(gb) = gb {
                accumulate_broadcast(before, b, &gb);
            }
        }
        &Op::Scale { a, c } => {
            let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(before, a, &ga);
        }
        &Op::Unary { a, kind } => {
            let x = &before[a].data;
            let y = &node.data;
            let ga: Vec<f64> = match kind {
                Unary::Sin => g.iter().zip(x).map(|(v, x)| v * x.cos()).collect(),
                Unary::Cos => g.iter().zip(x).map(|(v, x)| -v * x.sin()).collect(),
                Unary::Sigmoid => g.iter().zip(y).map(|(v, y)| v * y * (1.0 - y)).collect(),
                Unary::Relu => g.iter().zip(x).map(|(v, x)| if *x > 0.0 { *v } else { 0.0 }).collect(),
            };
            accumulate(before, a, &ga);
        }
        &Op::Softmax { a, width } => {
            let y = &node.data;
            let mut ga = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(width).zip(y.chunks(width)).zip(ga.chunks_mut(width)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for j in 0..width {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(before, a, &ga);
        }
        Op::CrossEntropy { probs, labels, classes } => {
            let (probs, classes) = (*probs, *classes);
            let rows = labels.len();
            let scale = g[0] / rows as f64;
            if let Op::Softmax { a: logits, .. } = before[probs].op {
                let p = &before[probs].data;
                let mut gl = vec![0.0; p.len()];
                for (i, &y) in labels.iter().enumerate() {
                    for c in 0..classes {
                        gl[i * classes + c] = scale * p[i * classes + c];
                    }
                    gl[i * classes + y] -= scale;
                }
                accumulate(before, logits, &gl);
            } else {
                let p = &before[probs].data;
                let mut gp = vec![0.0; p.len()];
                for (i, &y) in labels.iter().enumerate() {
                    gp[i * classes + y] = -scale / p[i * classes + y];
                }
                accumulate(before, probs, &gp);
            }
        }
        Op::LayerNorm { x, gain, bias, width, xhat, inv_std } => {
            let (x, gain, bias, w) = (*x, *gain, *bias, *width);
            let gv = before[gain].data.clone();
            let mut gx = vec![0.0; xhat.len()];
            let mut ggain = vec![0.0; w];
            let mut gbias = vec![0.0; w];
            for (r, is) in inv_std.iter().enumerate() {
                let gr = &g[r * w..(r + 1) * w];
                let hr = &xhat[r * w..(r + 1) * w];
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..w {
                    let d = gr[j] * gv[j];
                    sum_d += d;
                    sum_dh += d * hr[j];
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                }
                let inv_w = 1.0 / w as f64;
                for j in 0..w {
                    let d = gr[j] * gv[j];
                    gx[r * w + j] = is * (d - inv_w * sum_d - hr[j] * inv_w * sum_dh);
                }
            }
            accumulate(before, x, &gx);
            accumulate(before, gain, &ggain);
            accumulate(before, bias, &gbias);
        }
        &Op::MeanGroups { a, group, width } => {
            let rows = before[a].data.len() / width;
            let inv = 1.0 / group as f64;
            let mut ga = vec![0.0; rows * width];
            for r in 0..rows {
                let src = &g[(r / group) * width..(r / group + 1) * width];
                for (o, v) in ga[r * width..(r + 1) * width].iter_mut().zip(src) {
                    *o = v * inv;
                }
            }
            accumulate(before, a, &ga);
        }
        &Op::Concat { a, b, p, q } => {
            let rows = g.len() / (p + q).max(1);
            let mut ga = Vec::with_capacity(rows * p);
            let mut gb = Vec::with_capacity(rows * q);
            for r in 0..rows {
                let row = &g[r * (p + q)..(r + 1) * (p + q)];
                ga.extend_from_slice(&row[..p]);
                gb.extend_from_slice(&row[p..]);
            }
            accumulate(before, a, &ga);
            accumulate(before, b, &gb);
        }
        Op::Gather { table, idx, width } => {
            let (table, width) = (*table, *width);
            if before[table].requires_grad {
                let tg = before[table].grad_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (t, v) in tg[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *t += v;
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            let ga: Vec<f64> = g.iter().zip(mask).map(|(v, m)| v * m).collect();
            accumulate(before, *a, &ga);
        }
        &Op::SplitHeads { a, batch, seq, heads, head_dim: hd } => {
            let mut ga = vec![0.0; g.len()];
            for b in 0..batch {
                for s in 0..seq {
                    for h in 0..heads {
                        let src = (b * seq + s) * heads * hd + h * hd;
                        let dst = ((b * heads + h) * seq + s) * hd;
                        ga[src..src + hd].copy_from_slice(&g[dst..dst + hd]);
                    }
                }
            }
            accumulate(before, a, &ga);
        }
        &Op::MergeHeads { a, batch, seq, heads, head_dim: hd } => {
            let mut ga = vec![0.0; g.len()];
            for b in 0..batch {
                for s in 0..seq {
                    for h in 0..heads {
                        let dst = (b * seq + s) * heads * hd + h * hd;
                        let src = ((b * heads + h) * seq + s) * hd;
                        ga[src..src + hd].copy_from_slice(&g[dst..dst + hd]);
                    }
                }
            }
            accumulate(before, a, &ga);
        }
        &Op::SumAll { a } => {
            let n = before[a].data.len();
            accumulate(before, a, &vec![g[0]; n]);
        }
    }
}
