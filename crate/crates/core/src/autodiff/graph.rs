//! Append-only computation tape with reverse-mode gradients.
//!
//! Every op validates shapes, computes its value eagerly and appends one
//! node. `backward` walks node ids in strictly decreasing order, which is a
//! valid reverse topological order because inputs always precede consumers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transducer::lattice;

/// Handle to a node on a [`Graph`]. Ids increase with insertion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    RowNormalize(Var, f64),
    Im2col { input: Var, kernel: usize, stride: usize },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherPerRow(Var, Vec<Vec<usize>>),
    ReplaceRows(Var, Var, Vec<usize>),
    RelBias { table: Var, len: usize, clip: usize },
    OuterAdd(Var, Var),
    Rnnt { logp: Var, frames: usize, labels: Vec<usize>, alpha: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::RowNormalize(..) => "row_normalize",
            Op::Im2col { .. } => "im2col",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherPerRow(..) => "gather_per_row",
            Op::ReplaceRows(..) => "replace_rows",
            Op::RelBias { .. } => "rel_bias",
            Op::OuterAdd(..) => "outer_add",
            Op::Rnnt { .. } => "rnnt_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::ReplaceRows(a, b, _)
            | Op::OuterAdd(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::RowNormalize(a, _)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::GatherPerRow(a, _) => vec![*a],
            Op::Im2col { input, .. } => vec![*input],
            Op::RelBias { table, .. } => vec![*table],
            Op::Rnnt { logp, .. } => vec![*logp],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape. Single-threaded; build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `a[m,k] * b[k,n]`
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn layer_norm_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    (row.iter().map(|x| (x - mean) / sd).collect(), sd)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let off = (j as isize - i as isize).clamp(-(clip as isize), clip as isize);
    (off + clip as isize) as usize
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a constant (no gradient is tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if !is_matrix(t) {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, value)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |p, q| p * q)
    }

    fn row_broadcast(&mut self, op: Op, m: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, bias) = (self.value(m), self.value(v));
        let c = x.cols();
        if bias.len() != c || x.shape().is_empty() {
            return Err(Error::shape(
                op.name(),
                format!("row vector {:?} does not match {:?}", bias.shape(), x.shape()),
            ));
        }
        let data = x.data().iter().enumerate().map(|(i, &p)| f(p, bias.data()[i % c])).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, value)
    }

    /// Adds a row vector to every row of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::AddRow(m, v), m, v, |p, q| p + q)
    }

    /// Multiplies every row of `m` elementwise by a row vector.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::MulRow(m, v), m, v, |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], data)?)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", a)?;
        let data = transpose_raw(self.value(a).data(), m, n);
        self.push(Op::Transpose(a), Tensor::new(vec![n, m], data)?)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push(Op::Reshape(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Gelu(a), a, gelu)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    fn rowwise(&mut self, op: Op, a: Var, f: impl Fn(&[f64], &mut [f64])) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            f(src, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(op, value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(Op::Softmax(a), a, softmax_row)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(Op::LogSoftmax(a), a, log_softmax_row)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.rowwise(Op::LayerNorm(a, eps), a, |src, dst| {
            dst.copy_from_slice(&layer_norm_row(src, eps).0);
        })
    }

    /// Divides each row by `max(norm, floor)`.
    pub fn row_normalize(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.rowwise(Op::RowNormalize(a, floor), a, |src, dst| {
            let n = row_norm(src).max(floor);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s / n;
            }
        })
    }

    /// Unfolds a `[T, C]` sequence into `[ceil(T/stride), kernel*C]` windows
    /// centred on `stride*o`, zero-padded on both sides.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, c) = self.matrix("im2col", a)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("im2col", "kernel and stride must be positive"));
        }
        let out_len = t.div_ceil(stride);
        let half = (kernel / 2) as isize;
        let x = self.value(a).data();
        let mut data = vec![0.0; out_len * kernel * c];
        for o in 0..out_len {
            for k in 0..kernel {
                let src = (stride * o) as isize + k as isize - half;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let dst = o * kernel * c + k * c;
                data[dst..dst + c].copy_from_slice(&x[src * c..(src + 1) * c]);
            }
        }
        self.push(Op::Im2col { input: a, kernel, stride }, Tensor::new(vec![out_len, kernel * c], data)?)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("columns {start}..{end} of [{m}, {n}]")));
        }
        let x = self.value(a);
        let data = (0..m).flat_map(|i| x.row(i)[start..end].to_vec()).collect();
        self.push(Op::SliceCols(a, start, end), Tensor::new(vec![m, end - start], data)?)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let m = self.matrix("concat_cols", parts[0])?.0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![m, n], data)?)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).cols();
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n || t.shape().len() > 2 {
                return Err(Error::shape("concat_rows", format!("{:?} with {n} columns", t.shape())));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![m, n], data)?)
    }

    /// Selects rows (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let data = rows.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        self.push(Op::GatherRows(a, rows.to_vec()), Tensor::new(vec![rows.len(), n], data)?)
    }

    /// `out[i][k] = a[i][index[i][k]]`; every row must select the same count.
    pub fn gather_per_row(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.matrix("gather_per_row", a)?;
        let k = index.first().map_or(0, Vec::len);
        if index.len() != m || k == 0 || index.iter().any(|r| r.len() != k || r.iter().any(|&j| j >= n)) {
            return Err(Error::shape("gather_per_row", format!("index table does not fit [{m}, {n}]")));
        }
        let x = self.value(a);
        let data = index.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&j| x.at(i, j))).collect();
        self.push(Op::GatherPerRow(a, index.to_vec()), Tensor::new(vec![m, k], data)?)
    }

    /// Replaces the listed rows of `x` with the row vector `v`.
    pub fn replace_rows(&mut self, x: Var, v: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("replace_rows", x)?;
        if self.value(v).len() != n {
            return Err(Error::shape("replace_rows", format!("{:?} into rows of width {n}", self.shape(v))));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("replace_rows", format!("row {bad} of {m}")));
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut data = self.value(x).data().to_vec();
        let fill = self.value(v).data().to_vec();
        for &r in &rows {
            data[r * n..(r + 1) * n].copy_from_slice(&fill);
        }
        self.push(Op::ReplaceRows(x, v, rows), Tensor::new(vec![m, n], data)?)
    }

    /// Expands a `2*clip+1` table into the `[len, len]` bias matrix
    /// `b[i][j] = table[clip(j - i, -clip, clip) + clip]`.
    pub fn rel_bias(&mut self, table: Var, len: usize, clip: usize) -> Result<Var> {
        let t = self.value(table);
        if t.len() != 2 * clip + 1 || len == 0 {
            return Err(Error::shape("rel_bias", format!("table {:?} for clip {clip}", t.shape())));
        }
        let mut data = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                data[i * len + j] = t.data()[rel_index(i, j, clip)];
            }
        }
        self.push(Op::RelBias { table, len, clip }, Tensor::new(vec![len, len], data)?)
    }

    /// `out[t * U + u] = a[t] + b[u]` for `a: [T, J]`, `b: [U, J]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, j) = self.matrix("outer_add", a)?;
        let (u, j2) = self.matrix("outer_add", b)?;
        if j != j2 {
            return Err(Error::shape("outer_add", format!("[{t}, {j}] vs [{u}, {j2}]")));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            for ui in 0..u {
                data.extend(x.row(ti).iter().zip(y.row(ui)).map(|(p, q)| p + q));
            }
        }
        self.push(Op::OuterAdd(a, b), Tensor::new(vec![t * u, j], data)?)
    }

    /// Transducer negative log-likelihood of `labels` given a log-softmaxed
    /// lattice with `frames * (labels.len() + 1)` rows and blank in the last column.
    pub fn rnnt_loss(&mut self, logp: Var, frames: usize, labels: &[usize]) -> Result<Var> {
        let lp = self.value(logp);
        let states = labels.len() + 1;
        if frames == 0 || lp.rows() != frames * states {
            return Err(Error::shape(
                "rnnt_loss",
                format!("lattice {:?} for {frames} frames and {} labels", lp.shape(), labels.len()),
            ));
        }
        let v1 = lp.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l + 1 >= v1) {
            return Err(Error::input(format!("label {bad} outside vocabulary of {}", v1 - 1)));
        }
        let alpha = lattice::alphas(lp.data(), frames, labels, v1);
        let log_z = lattice::log_likelihood(&alpha, lp.data(), frames, labels.len(), v1);
        let op = Op::Rnnt { logp, frames, labels: labels.to_vec(), alpha };
        self.push(op, Tensor::scalar(-log_z))
    }

    /// Runs reverse-mode differentiation from the scalar `output`.
    ///
    /// Returns one gradient per node id; entries are `None` for nodes that do
    /// not require gradients or are unreachable from `output`. The graph can
    /// only be differentiated once.
    pub fn backward(&mut self, output: Var) -> Result<Vec<Option<Tensor>>> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::shape("backward", format!("output {:?} is not scalar", self.shape(output))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => Tensor::new(node.value.shape().to_vec(), g).map(Some),
                _ => Ok(None),
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` with upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(z).map(|(g, z)| g * z).collect()),
                    (*b, g.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddRow(m, v) => {
                let c = val(*v).len();
                let mut gv = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    gv[i % c] += gi;
                }
                vec![(*m, g.to_vec()), (*v, gv)]
            }
            Op::MulRow(m, v) => {
                let (x, w) = (val(*m), val(*v));
                let c = w.len();
                let mut gv = vec![0.0; c];
                let mut gm = vec![0.0; g.len()];
                for (i, gi) in g.iter().enumerate() {
                    gv[i % c] += gi * x[i];
                    gm[i] = gi * w[i % c];
                }
                vec![(*m, gm), (*v, gv)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if needs(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    out.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                out
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                vec![(*a, transpose_raw(g, s[1], s[0]))]
            }
            Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Gelu(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = g - y.exp() * total;
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm(a, eps) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), xr), out) in g.chunks(c).zip(y.chunks(c)).zip(val(*a).chunks(c)).zip(gx.chunks_mut(c)) {
                    let sd = layer_norm_row(xr, *eps).1;
                    let n = c as f64;
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (g - mean_g - y * mean_gy) / sd;
                    }
                }
                vec![(*a, gx)]
            }
            Op::RowNormalize(a, floor) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, xr), out) in g.chunks(c).zip(val(*a).chunks(c)).zip(gx.chunks_mut(c)) {
                    let n = row_norm(xr);
                    if n > *floor {
                        let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                        for ((o, g), x) in out.iter_mut().zip(gr).zip(xr) {
                            *o = g / n - x * dot / (n * n * n);
                        }
                    } else {
                        for (o, g) in out.iter_mut().zip(gr) {
                            *o = g / floor;
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::Im2col { input, kernel, stride } => {
                let s = self.nodes[input.0].value.shape();
                let (t, c) = (s[0], s[1]);
                let half = (kernel / 2) as isize;
                let mut gx = vec![0.0; t * c];
                let out_len = node.value.shape()[0];
                for o in 0..out_len {
                    for k in 0..*kernel {
                        let src = (stride * o) as isize + k as isize - half;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let base = o * kernel * c + k * c;
                        for ch in 0..c {
                            gx[src * c + ch] += g[base + ch];
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::SliceCols(a, start, end) => {
                let s = self.nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let w = end - start;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(*a, gx)]
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, gp));
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.nodes[p.0].value.len();
                        let gp = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, gp)
                    })
                    .collect()
            }
            Op::GatherRows(a, rows) => {
                let c = node.value.cols();
                let mut gx = vec![0.0; val(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[k * c + j];
                    }
                }
                vec![(*a, gx)]
            }
            Op::GatherPerRow(a, index) => {
                let n = self.nodes[a.0].value.cols();
                let k = node.value.cols();
                let mut gx = vec![0.0; val(*a).len()];
                for (i, row) in index.iter().enumerate() {
                    for (q, &j) in row.iter().enumerate() {
                        gx[i * n + j] += g[i * k + q];
                    }
                }
                vec![(*a, gx)]
            }
            Op::ReplaceRows(x, v, rows) => {
                let n = node.value.cols();
                let mut gx = g.to_vec();
                let mut gv = vec![0.0; n];
                for &r in rows {
                    for j in 0..n {
                        gv[j] += gx[r * n + j];
                        gx[r * n + j] = 0.0;
                    }
                }
                vec![(*x, gx), (*v, gv)]
            }
            Op::RelBias { table, len, clip } => {
                let mut gt = vec![0.0; 2 * clip + 1];
                for i in 0..*len {
                    for j in 0..*len {
                        gt[rel_index(i, j, *clip)] += g[i * len + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::OuterAdd(a, b) => {
                let (t, j) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let u = self.nodes[b.0].value.rows();
                let mut ga = vec![0.0; t * j];
                let mut gb = vec![0.0; u * j];
                for ti in 0..t {
                    for ui in 0..u {
                        let row = &g[(ti * u + ui) * j..(ti * u + ui + 1) * j];
                        for k in 0..j {
                            ga[ti * j + k] += row[k];
                            gb[ui * j + k] += row[k];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Rnnt { logp, frames, labels, alpha } => {
                let lp = val(*logp);
                let v1 = self.nodes[logp.0].value.cols();
                let mut gl = lattice::loss_grad(lp, alpha, *frames, labels, v1);
                gl.iter_mut().for_each(|x| *x *= g[0]);
                vec![(*logp, gl)]
            }
        }
    }
}
