//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints into each input. Nodes are
//! only ever appended, so the tape is topologically ordered by construction.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in CSR form, used for fixed aggregation operators.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets sorted by row.
    pub fn from_sorted_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut offsets = vec![0usize; n_rows + 1];
        let mut prev = 0;
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols || r < prev {
                return Err(Error::InvalidArgument(format!(
                    "sparse triplet ({r}, {c}) out of order or range"
                )));
            }
            prev = r;
            offsets[r + 1] += 1;
        }
        for i in 0..n_rows {
            offsets[i + 1] += offsets[i];
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            offsets,
            cols: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
        })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(vec![self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for idx in self.offsets[r]..self.offsets[r + 1] {
                let c = self.cols[idx];
                out.set(r, c, out.get(r, c) + self.values[idx]);
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    LeakyRelu(Var, f64),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Sqrt(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    GroupedRowDot(Var, Var),
    HeadScale(Var, Var),
    HeadMean(Var, usize),
    SparseMatMul(Arc<SparseMatrix>, Var),
    Reshape(Var),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of a forward computation.
///
/// The tape is single-threaded; independent tapes can live on separate
/// workers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(g) => g.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn dims3(t: &Tensor) -> Option<(usize, usize, usize)> {
    match t.shape() {
        [b, m, k] => Some((*b, *m, *k)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]`
    /// transposed when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || Error::shape("batch_matmul", av.shape(), bv.shape());
        let (ba, m, k) = dims3(av).ok_or_else(err)?;
        let (bb, r1, r2) = dims3(bv).ok_or_else(err)?;
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || kb != k {
            return Err(err());
        }
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![ba, m, n], out)?,
            rg,
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, rg, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Scale(x, c)))
    }

    /// Element-wise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if c.len() != xv.len() {
            return Err(Error::shape("mul_const", xv.shape(), &[c.len()]));
        }
        let data = xv.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::MulConst(x, c)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, op))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Concatenates 2-d operands along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat", self.value(*first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            rg,
            Op::Concat(parts.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(x)))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n || n == 0 {
            return Err(Error::shape("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mu) * inv;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % n] + b[i % n])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax over the last axis. Masked-out entries are exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("softmax_rows", xv.shape(), &[m.len()]));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                if keep(r * n + c) {
                    max = max.max(row[c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for c in 0..n {
                if keep(r * n + c) {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    total += e;
                }
            }
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n {
                out[r * n + c] = row[c] - lse;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::LogSoftmax(x)))
    }

    /// Mean negative log-likelihood over the selected rows of a
    /// log-probability matrix.
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
        let lv = self.value(logp);
        let c = lv.cols();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("nll over an empty row set".into()));
        }
        let mut total = 0.0;
        for &r in rows {
            let t = *targets
                .get(r)
                .ok_or_else(|| Error::shape("nll_loss", lv.shape(), &[targets.len()]))?;
            if r >= lv.rows() || t >= c {
                return Err(Error::shape("nll_loss", lv.shape(), &[r, t]));
            }
            total -= lv.get(r, t);
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::shape("gather_rows", xv.shape(), &[idx.len()]));
        }
        let t = xv.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::GatherRows(x, idx.to_vec())))
    }

    /// `out[idx[r]] += x[r]` into an `n_out`-row zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if idx.len() != xv.rows() || idx.iter().any(|&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", xv.shape(), &[idx.len(), n_out]));
        }
        let mut out = vec![0.0; n_out * c];
        for (r, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(xv.row(r))
                .for_each(|(o, v)| *o += v);
        }
        let t = Tensor::new(vec![n_out, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::ScatterAddRows(x, idx.to_vec())))
    }

    /// Softmax over groups of rows sharing a segment id, independently per
    /// column.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if seg.len() != xv.rows() || seg.iter().any(|&s| s >= n_seg) {
            return Err(Error::shape("segment_softmax", xv.shape(), &[seg.len()]));
        }
        let mut max = vec![f64::NEG_INFINITY; n_seg * c];
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..c {
                let m = &mut max[s * c + k];
                *m = m.max(xv.get(r, k));
            }
        }
        let mut out = vec![0.0; xv.len()];
        let mut total = vec![0.0; n_seg * c];
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..c {
                let e = (xv.get(r, k) - max[s * c + k]).exp();
                out[r * c + k] = e;
                total[s * c + k] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..c {
                out[r * c + k] /= total[s * c + k];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SegmentSoftmax(x, seg.to_vec())))
    }

    /// Per-head dot products: `x` is `[N, K·F]`, `a` is `[K, F]`, result
    /// `[N, K]` with `out[n, k] = <x[n, kF..(k+1)F], a[k]>`.
    pub fn grouped_row_dot(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(a));
        let (k, f) = (av.rows(), av.cols());
        if xv.cols() != k * f {
            return Err(Error::shape("grouped_row_dot", xv.shape(), av.shape()));
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let row = xv.row(r);
            for h in 0..k {
                out[r * k + h] = row[h * f..(h + 1) * f]
                    .iter()
                    .zip(av.row(h))
                    .map(|(p, q)| p * q)
                    .sum();
            }
        }
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(Tensor::new(vec![n, k], out)?, rg, Op::GroupedRowDot(x, a)))
    }

    /// Scales each head block of `x` (`[E, K·F]`) by `alpha` (`[E, K]`).
    pub fn head_scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(alpha));
        let k = av.cols();
        if av.rows() != xv.rows() || k == 0 || xv.cols() % k != 0 {
            return Err(Error::shape("head_scale", xv.shape(), av.shape()));
        }
        let f = xv.cols() / k;
        let mut out = xv.data().to_vec();
        for r in 0..xv.rows() {
            for h in 0..k {
                let s = av.get(r, h);
                let base = r * k * f + h * f;
                out[base..base + f].iter_mut().for_each(|v| *v *= s);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(t, rg, Op::HeadScale(x, alpha)))
    }

    /// Averages the `heads` column blocks of `x` (`[N, K·F]` -> `[N, F]`).
    pub fn head_mean(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if heads == 0 || xv.cols() % heads != 0 {
            return Err(Error::shape("head_mean", xv.shape(), &[heads]));
        }
        let f = xv.cols() / heads;
        let n = xv.rows();
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            let row = xv.row(r);
            for h in 0..heads {
                for j in 0..f {
                    out[r * f + j] += row[h * f + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= heads as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, f], out)?, rg, Op::HeadMean(x, heads)))
    }

    /// Product of a constant sparse matrix with a dense matrix.
    pub fn sparse_matmul(&mut self, a: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if a.n_cols != xv.rows() {
            return Err(Error::shape("sparse_matmul", &[a.n_rows, a.n_cols], xv.shape()));
        }
        let c = xv.cols();
        let mut out = vec![0.0; a.n_rows * c];
        for r in 0..a.n_rows {
            let dst = &mut out[r * c..(r + 1) * c];
            for idx in a.offsets[r]..a.offsets[r + 1] {
                let w = a.values[idx];
                dst.iter_mut()
                    .zip(xv.row(a.cols[idx]))
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        let t = Tensor::new(vec![a.n_rows, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SparseMatMul(a, x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Repeats a vector (any shape with `n` elements) as `rows` rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(xv.data());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, rg, Op::BroadcastRows(x)))
    }

    /// Reverse sweep from a scalar loss. Gradients from any earlier sweep are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoint(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut self.nodes[v.0].grad, &dv);
                }
            }
        }
        Ok(())
    }

    /// Input adjoints for node `i` given its output gradient `g`.
    fn adjoint(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut res = vec![];
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, &mut da, false);
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, &mut db, false);
                    res.push((*b, db));
                }
                res
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bs, m, k) = dims3(av).expect("checked at record time");
                let n = node.value.shape()[2];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for bi in 0..bs {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                    let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // y = a b^T, b is [n, k]
                        gemm(m, n, k, gs, false, b_s, false, da_s, false);
                        gemm(n, m, k, gs, true, a_s, false, db_s, false);
                    } else {
                        gemm(m, n, k, gs, false, b_s, true, da_s, false);
                        gemm(k, m, n, a_s, true, gs, false, db_s, false);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(d, y)| d * y).collect()),
                    (*b, g.iter().zip(av).map(|(d, x)| d * x).collect()),
                ]
            }
            Op::AddRow(x, bias) => {
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                if n > 0 {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::MulConst(x, c) => vec![(*x, g.iter().zip(c).map(|(d, m)| d * m).collect())],
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { d * slope })
                        .collect(),
                )]
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Elu(x) => {
                let xv = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv.iter().zip(out))
                        .map(|(d, (v, y))| if *v > 0.0 { *d } else { d * (y + 1.0) })
                        .collect(),
                )]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(d, y)| d * y).collect())],
            Op::Sqrt(x) => vec![(
                *x,
                g.iter().zip(out).map(|(d, y)| d * 0.5 / y).collect(),
            )],
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    res.push((*p, d));
                }
                res
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                let rows = inv_std.len();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gv[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * hr[c];
                    }
                    let scale = inv_std[r] / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = scale * (n as f64 * dxhat[c] - s1 - hr[c] * s2);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..node.value.rows() {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &out[r * n..(r + 1) * n]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for r in 0..node.value.rows() {
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for c in 0..n {
                        dx[r * n + c] = gr[c] - out[r * n + c].exp() * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Nll {
                logp,
                targets,
                rows,
            } => {
                let lv = val(*logp);
                let c = lv.cols();
                let mut d = vec![0.0; lv.len()];
                let w = g[0] / rows.len() as f64;
                for &r in rows {
                    d[r * c + targets[r]] -= w;
                }
                vec![(*logp, d)]
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(o, v)| *o += v);
                }
                vec![(*x, d)]
            }
            Op::ScatterAddRows(x, idx) => {
                let c = val(*x).cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    d.extend_from_slice(&g[i * c..(i + 1) * c]);
                }
                vec![(*x, d)]
            }
            Op::SegmentSoftmax(x, seg) => {
                let c = node.value.cols();
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; n_seg * c];
                for (r, &s) in seg.iter().enumerate() {
                    for k in 0..c {
                        dots[s * c + k] += g[r * c + k] * out[r * c + k];
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for (r, &s) in seg.iter().enumerate() {
                    for k in 0..c {
                        dx[r * c + k] = out[r * c + k] * (g[r * c + k] - dots[s * c + k]);
                    }
                }
                vec![(*x, dx)]
            }
            Op::GroupedRowDot(x, a) => {
                let (xv, av) = (val(*x), val(*a));
                let (k, f) = (av.rows(), av.cols());
                let mut dx = vec![0.0; xv.len()];
                let mut da = vec![0.0; av.len()];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    for h in 0..k {
                        let gh = g[r * k + h];
                        for j in 0..f {
                            dx[r * k * f + h * f + j] = gh * av.get(h, j);
                            da[h * f + j] += gh * row[h * f + j];
                        }
                    }
                }
                vec![(*x, dx), (*a, da)]
            }
            Op::HeadScale(x, alpha) => {
                let (xv, av) = (val(*x), val(*alpha));
                let k = av.cols();
                let f = xv.cols() / k;
                let mut dx = vec![0.0; xv.len()];
                let mut dalpha = vec![0.0; av.len()];
                for r in 0..xv.rows() {
                    for h in 0..k {
                        let s = av.get(r, h);
                        let base = r * k * f + h * f;
                        let mut acc = 0.0;
                        for j in 0..f {
                            dx[base + j] = g[base + j] * s;
                            acc += g[base + j] * xv.data()[base + j];
                        }
                        dalpha[r * k + h] = acc;
                    }
                }
                vec![(*x, dx), (*alpha, dalpha)]
            }
            Op::HeadMean(x, heads) => {
                let xv = val(*x);
                let f = xv.cols() / heads;
                let inv = 1.0 / *heads as f64;
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    for h in 0..*heads {
                        for j in 0..f {
                            dx[r * heads * f + h * f + j] = g[r * f + j] * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SparseMatMul(a, x) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..a.n_rows {
                    let gr = &g[r * c..(r + 1) * c];
                    for idx in a.offsets[r]..a.offsets[r + 1] {
                        let w = a.values[idx];
                        let j = a.cols[idx];
                        dx[j * c..(j + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, v)| *o += w * v);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::BroadcastRows(x) => {
                let n = val(*x).len();
                let mut d = vec![0.0; n];
                if n > 0 {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                vec![(*x, d)]
            }
        }
    }
}
