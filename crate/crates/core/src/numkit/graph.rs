//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever the
//! backward rule needs. `backward` walks the tape once in reverse and then
//! frees it; a consumed graph refuses a second `backward`.

use super::tensor::{kernels, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        scale: f64,
        // Lower-triangular probabilities of every segment, row-major and
        // concatenated.
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// The recorded computation of one forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    state: State,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by the `Var` of each
/// node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            state: State::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.state == State::Consumed {
            return Err(Error::State("graph already consumed by backward".into()));
        }
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients are produced for it when `requires_grad`
    /// is set on the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, rg, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let mut c = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        c.requires_grad = true;
        self.leaf(c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} times ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(shape_err("add_row", format!("width {n} vs bias {}", tb.len())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let tanh: Vec<f64> = tx.data().iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let data = tx.data().iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x, tanh }, ng, "gelu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        tx.ensure_finite("softmax_rows")?;
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng, "softmax_rows")
    }

    /// Row softmax where row `i` only sees columns `0..=i + offset`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let tx = self.value(x);
        tx.ensure_finite("causal_softmax")?;
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let visible = (i + offset + 1).min(n);
            kernels::softmax_in_place(&mut row[..visible]);
            row[visible..].fill(0.0);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        // The softmax backward rule is exact for masked rows because the
        // masked outputs are zero.
        self.push(out, Op::Softmax(x), ng, "causal_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if n < 2 || self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", "needs width >= 2 and matching affine"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let src = tx.row(r);
            let (mean, inv) = kernels::row_moments(src);
            inv_std[r] = inv;
            for j in 0..n {
                let h = (src[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = dims(t);
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no rows requested"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Index(format!("row {i} of {r}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(table);
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| shape_err("concat_rows", "nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            ng,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| shape_err("concat_cols", "nothing to concatenate"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
            "concat_cols",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = dims(t);
        if targets.len() != m {
            return Err(shape_err("cross_entropy", format!("{m} rows, {} targets", targets.len())));
        }
        t.ensure_finite("cross_entropy")?;
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index(format!("target {target} outside vocabulary of {v}")));
            }
            let row = t.row(i);
            loss += kernels::log_sum_exp(row) - row[target];
            kernels::softmax_in_place(&mut probs[i * v..(i + 1) * v]);
        }
        loss /= m as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    /// `Σ_i w_i · CE_i`: the negative log-likelihood of each target row,
    /// weighted by `weights`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = dims(t);
        if targets.len() != m || weights.len() != m {
            return Err(shape_err(
                "weighted_cross_entropy",
                format!("{m} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        t.ensure_finite("weighted_cross_entropy")?;
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, (&target, &w)) in targets.iter().zip(weights).enumerate() {
            if target >= v {
                return Err(Error::Index(format!("target {target} outside vocabulary of {v}")));
            }
            let row = t.row(i);
            loss += w * (kernels::log_sum_exp(row) - row[target]);
            kernels::softmax_in_place(&mut probs[i * v..(i + 1) * v]);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
            "weighted_cross_entropy",
        )
    }

    /// Causal scaled dot-product attention run independently on each row
    /// segment `(start, len)` of the stacked `q`, `k`, `v`. Row `start + i`
    /// attends to rows `start..=start + i` only. Segments must tile the rows
    /// in order.
    ///
    /// Equal, up to summation order, to `softmax(causal(scale · q kᵀ)) v` per
    /// segment; one node replaces five per sequence.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let n = tq.rows();
        if tk.shape() != tq.shape() || tv.rows() != n {
            return Err(shape_err("segment_attention", "q, k, v row/width mismatch"));
        }
        let mut next = 0;
        for &(start, len) in segments {
            if start != next || len == 0 {
                return Err(shape_err("segment_attention", "segments must tile rows in order"));
            }
            next = start + len;
        }
        if next != n {
            return Err(shape_err("segment_attention", format!("segments cover {next} of {n} rows")));
        }
        tq.ensure_finite("segment_attention")?;
        tk.ensure_finite("segment_attention")?;
        let dv = tv.cols();
        let mut out = vec![0.0; n * dv];
        let mut probs = Vec::with_capacity(segments.iter().map(|&(_, l)| l * (l + 1) / 2).sum());
        for &(start, len) in segments {
            for i in 0..len {
                let qi = tq.row(start + i);
                let base = probs.len();
                for j in 0..=i {
                    let kj = tk.row(start + j);
                    probs.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                let p = &mut probs[base..];
                kernels::softmax_in_place(p);
                let orow = &mut out[(start + i) * dv..(start + i + 1) * dv];
                for (j, &pj) in p.iter().enumerate() {
                    orow.iter_mut().zip(tv.row(start + j)).for_each(|(o, x)| *o += pj * x);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::new(vec![n, dv], out)?,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                scale,
                probs,
            },
            ng,
            "segment_attention",
        )
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.state == State::Consumed || self.nodes.is_empty() {
            return Err(Error::State("backward without a recorded graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Index(format!("loss node {} not on tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        let mut out = Vec::with_capacity(n);
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let keep = matches!(node.op, Op::Leaf) && node.needs_grad;
            out.push(match (keep, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            });
        }
        self.nodes.clear();
        self.state = State::Consumed;
        Ok(Gradients { grads: out })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims(ta);
                let n = tb.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims(ta);
                let n = tb.rows();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                let n = y.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, d), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += d * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, d), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += d * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, d)| *v += c * d);
                }
            }
            Op::Gelu { x, tanh } => {
                let tx = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for (((v, d), xv), t) in gx.iter_mut().zip(g).zip(tx.data()).zip(tanh) {
                        *v += d * kernels::gelu_grad_with_tanh(*xv, *t);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), xr) in y.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = y.cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(v, d)| *v += d);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let xr = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            xr[j] += inv / nf * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let n = y.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gt[i * n..(i + 1) * n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(v, d)| *v += d);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = y.cols();
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        let dst = &mut gx[r * c + start..r * c + start + w];
                        dst.iter_mut().zip(gr).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            dst.iter_mut().zip(src).for_each(|(v, d)| *v += d);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &mut gl[i * v..(i + 1) * v];
                        let pr = &probs[i * v..(i + 1) * v];
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += g[0] * w * (pr[j] - onehot);
                        }
                    }
                }
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let dv = tv.cols();
                let n = tq.rows();
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gvv = vec![0.0; n * dv];
                let mut off = 0;
                let mut ds = Vec::new();
                for &(start, len) in segments {
                    for i in 0..len {
                        let p = &probs[off..off + i + 1];
                        off += i + 1;
                        let go = &g[(start + i) * dv..(start + i + 1) * dv];
                        ds.clear();
                        let mut dot = 0.0;
                        for (j, &pj) in p.iter().enumerate() {
                            let vj = tv.row(start + j);
                            let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += pj * dp;
                            ds.push(dp);
                            let dst = &mut gvv[(start + j) * dv..(start + j + 1) * dv];
                            dst.iter_mut().zip(go).for_each(|(x, o)| *x += pj * o);
                        }
                        let qi = tq.row(start + i);
                        for (j, &pj) in p.iter().enumerate() {
                            let s = scale * pj * (ds[j] - dot);
                            if s == 0.0 {
                                continue;
                            }
                            let kj = tk.row(start + j);
                            let gqi = &mut gq[(start + i) * d..(start + i + 1) * d];
                            gqi.iter_mut().zip(kj).for_each(|(x, kv)| *x += s * kv);
                            let gkj = &mut gk[(start + j) * d..(start + j + 1) * d];
                            gkj.iter_mut().zip(qi).for_each(|(x, qv)| *x += s * qv);
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gvv)] {
                    if let Some(dst) = self.acc(grads, var) {
                        dst.iter_mut().zip(&local).for_each(|(x, l)| *x += l);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 3], 0.7).with_requires_grad(true)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let va = g.param(&a).unwrap();
        let vb = g.constant(b.clone()).unwrap();
        let p = g.mul(va, vb).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(va).unwrap().data(), b.data());
        assert!(grads.wrt(vb).is_none());
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        assert!(matches!(Graph::new().backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_limits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let ce = g.cross_entropy(l, &[2]).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0] {
            let mut g = Graph::new();
            let l = g
                .constant(Tensor::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap())
                .unwrap();
            let ce = g.cross_entropy(l, &[0]).unwrap();
            let v = g.value(ce).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[3, 6], 2.0, &mut rng);
        let targets = [0, 5, 2];
        let mut oracle = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += lse - row[t];
        }
        oracle /= 3.0;
        let mut g = Graph::new();
        let l = g.constant(logits).unwrap();
        let ce = g.cross_entropy(l, &targets).unwrap();
        assert!((g.value(ce).data()[0] - oracle).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(g.cross_entropy(l, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3])).unwrap();
        let s = g.causal_softmax(x, 0).unwrap();
        let t = g.value(s);
        assert_eq!(t.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn segment_attention_matches_per_segment_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            Tensor::randn(&[7, 3], 1.0, &mut rng),
            Tensor::randn(&[7, 3], 1.0, &mut rng),
            Tensor::randn(&[7, 2], 1.0, &mut rng),
        );
        let segs = [(0, 3), (3, 1), (4, 3)];
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.param(&q).unwrap(), g.param(&k).unwrap(), g.param(&v).unwrap());
        let fused = g.segment_attention(vq, vk, vv, &segs, 0.7).unwrap();
        let fused_t = g.value(fused).clone();
        let w = g.constant(Tensor::randn(&[7, 2], 1.0, &mut rng)).unwrap();
        let prod = g.mul(fused, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let wt = g.value(w).clone();
        let fg = g.backward(loss).unwrap();

        let mut g = Graph::new();
        let (uq, uk, uv) = (g.param(&q).unwrap(), g.param(&k).unwrap(), g.param(&v).unwrap());
        let mut parts = Vec::new();
        for &(s0, l) in &segs {
            let ids: Vec<usize> = (s0..s0 + l).collect();
            let (sq, sk, sv) = (
                g.gather_rows(uq, &ids).unwrap(),
                g.gather_rows(uk, &ids).unwrap(),
                g.gather_rows(uv, &ids).unwrap(),
            );
            let sc = g.matmul_nt(sq, sk).unwrap();
            let sc = g.scale(sc, 0.7).unwrap();
            let p = g.causal_softmax(sc, 0).unwrap();
            parts.push(g.matmul(p, sv).unwrap());
        }
        let out = g.concat_rows(&parts).unwrap();
        assert!(g.value(out).max_abs_diff(&fused_t) < 1e-14);
        let wc = g.constant(wt).unwrap();
        let prod = g.mul(out, wc).unwrap();
        let loss = g.sum(prod).unwrap();
        let ug = g.backward(loss).unwrap();
        for (a, b) in [(vq, uq), (vk, uk), (vv, uv)] {
            assert!(fg.wrt(a).unwrap().max_abs_diff(ug.wrt(b).unwrap()) < 1e-13);
        }
    }

    #[test]
    fn segment_attention_rejects_gaps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(g.segment_attention(x, x, x, &[(0, 2), (3, 1)], 1.0).is_err());
        assert!(g.segment_attention(x, x, x, &[(0, 2)], 1.0).is_err());
    }

    #[test]
    fn weighted_cross_entropy_with_equal_weights_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let l = g.constant(logits).unwrap();
        let a = g.cross_entropy(l, &[0, 1, 2, 3]).unwrap();
        let b = g.weighted_cross_entropy(l, &[0, 1, 2, 3], &[0.25; 4]).unwrap();
        assert!((g.value(a).data()[0] - g.value(b).data()[0]).abs() < 1e-14);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        let y = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.mul(x, y), Err(Error::NonFinite { .. })));
    }
}
