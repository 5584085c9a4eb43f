use std::sync::Arc;

use super::kernels;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head self-attention call.
///
/// The input rows are `batch * seq_len` stacked sequences; `key_valid[r]`
/// marks which rows may be attended to (padding rows are excluded).
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub key_valid: Arc<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    Attention {
        qkv: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SquaredError(..) => "squared_error",
            Op::Attention { .. } => "attention",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { qkv, .. } => vec![*qkv],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Eagerly evaluated computation tape.
///
/// Every operation computes its value immediately and appends a node; node
/// order is therefore a topological order and [`Graph::backward`] walks it in
/// reverse. A graph is single-threaded; independent graphs share nothing.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op kind and parents of a node, for inspection.
    pub fn describe(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.kind(), op.parents())
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` if nothing has flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::shape(op, shape, &[0, 0]));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.kind())?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Broadcast add of a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if numel(self.shape(bias)) != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Scale(x, c)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Offset(x)))
    }

    fn map_rows(&mut self, x: Var, op: Op, f: fn(&[f64], &mut [f64])) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        if cols > 0 {
            for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
                f(src, dst);
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, op))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.map_rows(x, Op::Softmax(x), kernels::softmax_row)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.map_rows(x, Op::LogSoftmax(x), kernels::log_softmax_row)
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if numel(self.shape(gamma)) != cols || numel(self.shape(beta)) != cols {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Row lookup: embedding tables and row selection.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, cols) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::GatherRows(table, rows.to_vec()),
        ))
    }

    /// Selects `x[r, cols[r]]` for every row; result is a vector.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if cols.len() != n || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick", t.shape(), &[cols.len()]));
        }
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| t.data()[r * c + j])
            .collect();
        Ok(self.push(vec![n], out, Op::Pick(x, cols.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(shape, out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::InvalidInput("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(vec![1], vec![s], Op::Mean(x)))
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "squared_error")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![s], Op::SquaredError(a, b)))
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·seq_len) × 3d` with query, key and value blocks laid
    /// out side by side; the result is `(batch·seq_len) × d`. Keys whose row
    /// is not valid are skipped entirely, so padding never changes the
    /// output of valid rows.
    pub fn attention(&mut self, qkv: Var, spec: AttentionSpec) -> Result<Var> {
        let t = self.value(qkv);
        let rows = spec.batch * spec.seq_len;
        if t.rows() != rows || t.cols() % 3 != 0 || spec.key_valid.len() != rows {
            return Err(Error::shape("attention", t.shape(), &[rows, t.cols()]));
        }
        let d = t.cols() / 3;
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::shape("attention", t.shape(), &[spec.heads]));
        }
        let dh = d / spec.heads;
        let l = spec.seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = t.data();
        let stride = 3 * d;
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; spec.batch * spec.heads * l * l];
        let mut scores = vec![0.0; l];
        for b in 0..spec.batch {
            let base = b * l;
            for h in 0..spec.heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..l {
                    let q = &src[(base + i) * stride + qo..(base + i) * stride + qo + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..l {
                        if spec.key_valid[base + j] {
                            let k = &src[(base + j) * stride + ko..(base + j) * stride + ko + dh];
                            scores[j] = kernels::dot(q, k) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    let p = &mut probs[((b * spec.heads + h) * l + i) * l..][..l];
                    let mut total = 0.0;
                    for j in 0..l {
                        if spec.key_valid[base + j] {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let o = &mut out[(base + i) * d + qo..(base + i) * d + qo + dh];
                    for j in 0..l {
                        if spec.key_valid[base + j] {
                            p[j] /= total;
                            let v = &src[(base + j) * stride + vo..(base + j) * stride + vo + dh];
                            for (oo, vv) in o.iter_mut().zip(v) {
                                *oo += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![rows, d], out, Op::Attention { qkv, spec, probs }))
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Accumulates `∂loss/∂leaf` into every reachable leaf that requires a
    /// gradient. Intermediate gradients are recomputed on every call, leaf
    /// gradients add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for i in (0..=loss.0).rev() {
            let node = &mut self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (parent, g) in contributions {
                let p = &mut self.nodes[parent.0];
                if p.requires_grad {
                    accumulate(p, &g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    res.push((*a, kernels::matmul_nt(g, tb.data(), m, n, k)));
                }
                if self.needs(*b) {
                    res.push((*b, kernels::matmul_tn(ta.data(), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                res.push((*a, ga));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    res.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, bias) => {
                res.push((*x, g.to_vec()));
                if self.needs(*bias) {
                    let cols = self.value(*x).cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Offset(x) | Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let inner = kernels::dot(gr, yr);
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - inner);
                    }
                }
                res.push((*x, gx));
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let n = cols as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            gx[r * cols + c] = is / n * (n * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gb[c] += gr[c];
                        }
                    }
                    res.push((*gamma, gg));
                    res.push((*beta, gb));
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                res.push((*x, g.iter().zip(vx).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect()));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                res.push((*x, g.iter().zip(vx).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect()));
            }
            Op::Exp(x) => res.push((*x, g.iter().zip(out).map(|(a, b)| a * b).collect())),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                res.push((*x, g.iter().zip(vx).map(|(a, b)| a / b).collect()));
            }
            Op::GatherRows(table, rows) => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        gt[r * cols + c] += g[k * cols + c];
                    }
                }
                res.push((*table, gt));
            }
            Op::Pick(x, cols) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut gx = vec![0.0; t.len()];
                for (r, &j) in cols.iter().enumerate() {
                    gx[r * c + j] = g[r];
                }
                res.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    res.push((*p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    res.push((*p, gp));
                    offset += c;
                }
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::SquaredError(a, b) => {
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) * g[0])
                    .collect();
                if self.needs(*b) {
                    res.push((*b, diff.iter().map(|v| -v).collect()));
                }
                res.push((*a, diff));
            }
            Op::Attention { qkv, spec, probs } => {
                res.push((*qkv, attention_backward(self.value(*qkv).data(), spec, probs, g)));
            }
        }
        res
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

fn attention_backward(src: &[f64], spec: &AttentionSpec, probs: &[f64], g: &[f64]) -> Vec<f64> {
    let rows = spec.batch * spec.seq_len;
    let d = src.len() / rows / 3;
    let dh = d / spec.heads;
    let l = spec.seq_len;
    let stride = 3 * d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = vec![0.0; src.len()];
    let mut dp = vec![0.0; l];
    for b in 0..spec.batch {
        let base = b * l;
        for h in 0..spec.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..l {
                let p = &probs[((b * spec.heads + h) * l + i) * l..][..l];
                let go = &g[(base + i) * d + qo..(base + i) * d + qo + dh];
                let mut inner = 0.0;
                for j in 0..l {
                    if !spec.key_valid[base + j] {
                        continue;
                    }
                    let v = &src[(base + j) * stride + vo..(base + j) * stride + vo + dh];
                    dp[j] = kernels::dot(go, v);
                    inner += p[j] * dp[j];
                    let gv = &mut grad[(base + j) * stride + vo..(base + j) * stride + vo + dh];
                    for (a, o) in gv.iter_mut().zip(go) {
                        *a += p[j] * o;
                    }
                }
                for j in 0..l {
                    if !spec.key_valid[base + j] {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let kq = src[(base + j) * stride + ko + c];
                        let qv = src[(base + i) * stride + qo + c];
                        grad[(base + i) * stride + qo + c] += ds * kq;
                        grad[(base + j) * stride + ko + c] += ds * qv;
                    }
                }
            }
        }
    }
    grad
}
