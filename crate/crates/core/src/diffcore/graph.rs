//! Tensor-level reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the node list in reverse and accumulates vector-Jacobian products.
//! Nodes that do not depend on any gradient-carrying leaf are skipped.

use std::sync::Arc;

use super::tensor::{gemm_acc, gemm_strided, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous `(start, len)` spans used by segment reductions.
pub type Segments = Arc<Vec<(usize, usize)>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Recip(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    GroupSumRows(Var, usize),
    GroupMaxRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    MaxPairCols(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    L2NormalizeRows(Var, f64),
    NormalizeRowSum(Var),
    SegmentMaxMean(Var, Segments, Vec<usize>),
    Diag(Var),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` is unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    contract!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x -= y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `[n, d] + [1, d]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        let (r, rd) = self.dims(row)?;
        contract!(r == 1 && rd == d, "add_row: [{n},{d}] + [{r},{rd}]");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(d.max(1)) {
            chunk.iter_mut().zip(&rv).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `[n, d] ⊙ [1, d]`, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        let (r, rd) = self.dims(row)?;
        contract!(r == 1 && rd == d, "mul_row: [{n},{d}] * [{r},{rd}]");
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(d.max(1)) {
            chunk.iter_mut().zip(&rv).for_each(|(x, y)| *x *= y);
        }
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    /// `[n, d] ⊙ [n, 1]`, broadcasting the column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        let (cn, c) = self.dims(col)?;
        contract!(c == 1 && cn == n, "mul_col: [{n},{d}] * [{cn},{c}]");
        let cv = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (chunk, s) in value.data_mut().chunks_mut(d.max(1)).zip(cv) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        contract!(k == k2, "matmul: [{m},{k}] x [{k2},{n}]");
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        contract!(k == k2, "matmul_nt: [{m},{k}] x [{n},{k2}]ᵀ");
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            0.0,
        );
        Ok(self.push(mat(m, n, out), Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(mat(n, m, out), Op::Transpose(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), f64::recip)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims(a)?;
        let mut value = self.value(a).clone();
        if d > 0 {
            for row in value.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Log-softmax of each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims(a)?;
        let mut value = self.value(a).clone();
        if d > 0 {
            for row in value.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
        }
        Ok(self.push(value, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// `[n, d] -> [1, d]` sum over rows.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims(a)?;
        let mut out = vec![0.0; d];
        if d > 0 {
            for row in self.value(a).data().chunks(d) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
        }
        Ok(self.push(mat(1, d, out), Op::SumRows(a), &[a]))
    }

    /// `[n, d] -> [1, d]` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        contract!(n > 0, "mean_rows of an empty matrix");
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks(d.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(mat(1, d, out), Op::MeanRows(a), &[a]))
    }

    /// `[n, d] -> [n, 1]` sum over columns.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        let out = if d == 0 {
            vec![0.0; n]
        } else {
            self.value(a).data().chunks(d).map(|r| r.iter().sum()).collect()
        };
        Ok(self.push(mat(n, 1, out), Op::SumCols(a), &[a]))
    }

    /// `[g·n, d] -> [g, d]`: sums each block of `n` consecutive rows.
    pub fn group_sum_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (rows, d) = self.dims(a)?;
        contract!(n > 0 && rows % n == 0, "group_sum_rows: {rows} rows not divisible by {n}");
        let g = rows / n;
        let src = self.value(a).data();
        let mut out = vec![0.0; g * d];
        for r in 0..rows {
            let dst = &mut out[(r / n) * d..(r / n + 1) * d];
            dst.iter_mut()
                .zip(&src[r * d..(r + 1) * d])
                .for_each(|(o, x)| *o += x);
        }
        Ok(self.push(mat(g, d, out), Op::GroupSumRows(a, n), &[a]))
    }

    /// `[g·n, d] -> [g, d]`: channelwise max within each block of `n` rows.
    pub fn group_max_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (rows, d) = self.dims(a)?;
        contract!(n > 0 && rows % n == 0, "group_max_rows: {rows} rows not divisible by {n}");
        let g = rows / n;
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; g * d];
        let mut arg = vec![0usize; g * d];
        for r in 0..rows {
            let gi = r / n;
            for c in 0..d {
                let x = src[r * d + c];
                if x > out[gi * d + c] {
                    out[gi * d + c] = x;
                    arg[gi * d + c] = r;
                }
            }
        }
        Ok(self.push(mat(g, d, out), Op::GroupMaxRows(a, arg), &[a]))
    }

    /// `[n, d] -> [1, d]` channelwise max over rows.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        contract!(n > 0, "max_rows of an empty matrix");
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut arg = vec![0usize; d];
        for r in 0..n {
            for c in 0..d {
                if src[r * d + c] > out[c] {
                    out[c] = src[r * d + c];
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(mat(1, d, out), Op::MaxRows(a, arg), &[a]))
    }

    /// `[n, 2d] -> [n, d]`: max of adjacent column pairs (maxout).
    pub fn max_pair_cols(&mut self, a: Var) -> Result<Var> {
        let (n, d2) = self.dims(a)?;
        contract!(d2 % 2 == 0, "max_pair_cols: odd width {d2}");
        let d = d2 / 2;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * d);
        let mut pick_second = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                let x0 = src[r * d2 + 2 * c];
                let x1 = src[r * d2 + 2 * c + 1];
                pick_second.push(x1 > x0);
                out.push(x0.max(x1));
            }
        }
        Ok(self.push(mat(n, d, out), Op::MaxPairCols(a, pick_second), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            contract!(r == n, "concat_cols: row count {r} vs {n}");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(mat(n, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.dims(parts[0])?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            contract!(c == d, "concat_rows: width {c} vs {d}");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(mat(rows, d, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        contract!(start + len <= n, "slice_rows {start}+{len} of {n}");
        let out = self.value(a).data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(mat(len, d, out), Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        contract!(start + len <= d, "slice_cols {start}+{len} of {d}");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        Ok(self.push(mat(n, len, out), Op::SliceCols(a, start), &[a]))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        contract!(idx.iter().all(|&i| i < n), "gather_rows index out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rows = idx.len();
        Ok(self.push(mat(rows, d, out), Op::GatherRows(a, idx), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Divides each row by `sqrt(|row|² + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.dims(a)?;
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(self.push(value, Op::L2NormalizeRows(a, eps), &[a]))
    }

    /// Divides each row by its sum.
    pub fn normalize_row_sum(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims(a)?;
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(d.max(1)) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Ok(self.push(value, Op::NormalizeRowSum(a), &[a]))
    }

    /// Set-to-set score matrix.
    ///
    /// For a score matrix `c: [R, C]` whose rows are partitioned by
    /// `row_segs` and columns by `col_segs`, entry `(i, j)` of the output is
    /// the mean over rows of segment `i` of the max over columns of segment `j`.
    pub fn segment_max_mean(
        &mut self,
        c: Var,
        row_segs: Segments,
        col_segs: &[(usize, usize)],
    ) -> Result<Var> {
        let (rows, cols) = self.dims(c)?;
        contract!(
            row_segs.iter().all(|&(s, l)| l > 0 && s + l <= rows)
                && col_segs.iter().all(|&(s, l)| l > 0 && s + l <= cols),
            "segment_max_mean: empty or out-of-range segment"
        );
        let bx = row_segs.len();
        let by = col_segs.len();
        let src = self.value(c).data();
        let mut out = vec![0.0; bx * by];
        let mut arg = vec![0usize; rows * by];
        for (i, &(rs, rl)) in row_segs.iter().enumerate() {
            for (j, &(cs, cl)) in col_segs.iter().enumerate() {
                let mut acc = 0.0;
                for r in rs..rs + rl {
                    let row = &src[r * cols + cs..r * cols + cs + cl];
                    let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
                    for (k, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            bi = k;
                        }
                    }
                    arg[r * by + j] = cs + bi;
                    acc += best;
                }
                out[i * by + j] = acc / rl as f64;
            }
        }
        Ok(self.push(mat(bx, by, out), Op::SegmentMaxMean(c, row_segs, arg), &[c]))
    }

    /// `[n, n] -> [n, 1]` diagonal.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a)?;
        contract!(n == m, "diag of non-square [{n},{m}]");
        let out = (0..n).map(|i| self.value(a).at(i, i)).collect();
        Ok(self.push(mat(n, 1, out), Op::Diag(a), &[a]))
    }

    /// `max(a, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), move |x| x.max(lo))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        contract!(lv.len() == 1, "backward needs a scalar loss, got shape {:?}", lv.shape());
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `write(out, beta)` straight into the gradient slot of `v`: with
    /// `beta = 1` onto an existing accumulator, otherwise into a new buffer.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, write: impl FnOnce(&mut [f64], f64)) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => write(acc.data_mut(), 1.0),
            slot => {
                let mut t = Tensor::zeros(node.value.shape());
                write(t.data_mut(), 0.0);
                *slot = Some(t);
            }
        }
    }

    /// Lets `add` add its contribution into the gradient slot of `v`,
    /// creating a zero accumulator first if needed.
    fn add_into(&self, grads: &mut [Option<Tensor>], v: Var, add: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if node.needs_grad {
            add(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())).data_mut());
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let gd = g.data();
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape")
        };
        let zip_map = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = val(v).data();
            let data = x
                .iter()
                .zip(y.data())
                .zip(gd)
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect();
            like(v, data)
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                send(*a, like(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect()));
                send(*b, like(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                let d = val(*r).len();
                let mut acc = vec![0.0; d];
                for row in gd.chunks(d.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                send(*r, like(*r, acc));
            }
            Op::MulRow(a, r) => {
                let rv = val(*r).data();
                let d = rv.len();
                let av = val(*a).data();
                let mut ga = Vec::with_capacity(gd.len());
                let mut gr = vec![0.0; d];
                for (grow, arow) in gd.chunks(d.max(1)).zip(av.chunks(d.max(1))) {
                    for c in 0..d {
                        ga.push(grow[c] * rv[c]);
                        gr[c] += grow[c] * arow[c];
                    }
                }
                send(*a, like(*a, ga));
                send(*r, like(*r, gr));
            }
            Op::MulCol(a, col) => {
                let cv = val(*col).data();
                let av = val(*a).data();
                let d = y.cols();
                let mut ga = Vec::with_capacity(gd.len());
                let mut gc = vec![0.0; cv.len()];
                for (r, (grow, arow)) in gd.chunks(d.max(1)).zip(av.chunks(d.max(1))).enumerate() {
                    for c in 0..d {
                        ga.push(grow[c] * cv[r]);
                        gc[r] += grow[c] * arow[c];
                    }
                }
                send(*a, like(*a, ga));
                send(*col, like(*col, gc));
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |out, beta| gemm_strided(m, n, k, gd, (n as isize, 1), bd, (1, n as isize), out, beta));
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |out, beta| gemm_strided(k, m, n, ad, (1, k as isize), gd, (n as isize, 1), out, beta));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).rows();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // dA = G · B
                self.accumulate(grads, *a, |out, beta| gemm_strided(m, n, k, gd, (n as isize, 1), bd, (k as isize, 1), out, beta));
                // dB = Gᵀ · A
                self.accumulate(grads, *b, |out, beta| gemm_strided(n, m, k, gd, (1, n as isize), ad, (k as isize, 1), out, beta));
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2()?;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = gd[j * m + i];
                    }
                }
                send(*a, like(*a, out));
            }
            Op::Tanh(a) => send(*a, zip_map(*a, &|_, y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, zip_map(*a, &|_, y, g| g * y * (1.0 - y))),
            Op::Exp(a) => send(*a, zip_map(*a, &|_, y, g| g * y)),
            Op::Log(a) => send(*a, zip_map(*a, &|x, _, g| g / x)),
            Op::Softplus(a) => send(*a, zip_map(*a, &|x, _, g| g * sigmoid(x))),
            Op::Relu(a) => send(*a, zip_map(*a, &|x, _, g| if x > 0.0 { g } else { 0.0 })),
            Op::Abs(a) => send(*a, zip_map(*a, &|x, _, g| g * x.signum() * (x != 0.0) as u8 as f64)),
            Op::Recip(a) => send(*a, zip_map(*a, &|_, y, g| -g * y * y)),
            Op::Square(a) => send(*a, zip_map(*a, &|x, _, g| 2.0 * g * x)),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                send(*a, zip_map(*a, &move |x, _, g| if x > lo { g } else { 0.0 }))
            }
            Op::SoftmaxRows(a) => {
                let d = y.cols().max(1);
                let mut out = Vec::with_capacity(gd.len());
                for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                send(*a, like(*a, out));
            }
            Op::LogSoftmaxRows(a) => {
                let d = y.cols().max(1);
                let mut out = Vec::with_capacity(gd.len());
                for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                    let s: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
                }
                send(*a, like(*a, out));
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                send(*a, like(*a, vec![gd[0]; n]));
            }
            Op::MeanAll(a) => {
                let n = val(*a).len();
                send(*a, like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let (n, _) = val(*a).dims2()?;
                let s = if matches!(node.op, Op::MeanRows(_)) { 1.0 / n as f64 } else { 1.0 };
                let mut out = Vec::with_capacity(val(*a).len());
                for _ in 0..n {
                    out.extend(gd.iter().map(|g| g * s));
                }
                send(*a, like(*a, out));
            }
            Op::SumCols(a) => {
                let (_, d) = val(*a).dims2()?;
                let out = gd.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
                send(*a, like(*a, out));
            }
            Op::GroupSumRows(a, n) => {
                let (rows, d) = val(*a).dims2()?;
                let mut out = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    let gi = r / n;
                    out.extend_from_slice(&gd[gi * d..(gi + 1) * d]);
                }
                send(*a, like(*a, out));
            }
            Op::GroupMaxRows(a, arg) => {
                let d = y.cols();
                let mut out = vec![0.0; val(*a).len()];
                for (i, &r) in arg.iter().enumerate() {
                    out[r * d + i % d] += gd[i];
                }
                send(*a, like(*a, out));
            }
            Op::MaxRows(a, arg) => {
                let d = y.cols();
                let mut out = vec![0.0; val(*a).len()];
                for c in 0..d {
                    out[arg[c] * d + c] += gd[c];
                }
                send(*a, like(*a, out));
            }
            Op::MaxPairCols(a, second) => {
                let mut out = vec![0.0; val(*a).len()];
                for (i, (&s, &g)) in second.iter().zip(gd).enumerate() {
                    out[2 * i + s as usize] = g;
                }
                send(*a, like(*a, out));
            }
            Op::ConcatCols(parts) => {
                let n = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut out = Vec::with_capacity(n * w);
                        for r in 0..n {
                            out.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        send(p, like(p, out));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.nodes[p.0].needs_grad {
                        send(p, like(p, gd[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let d = y.cols();
                self.add_into(grads, *a, |out| {
                    out[start * d..start * d + gd.len()].iter_mut().zip(gd).for_each(|(o, g)| *o += g);
                });
            }
            Op::SliceCols(a, start) => {
                let (n, d) = val(*a).dims2()?;
                let w = y.cols();
                self.add_into(grads, *a, |out| {
                    for r in 0..n {
                        out[r * d + start..r * d + start + w]
                            .iter_mut()
                            .zip(&gd[r * w..(r + 1) * w])
                            .for_each(|(o, g)| *o += g);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let d = y.cols();
                self.add_into(grads, *a, |out| {
                    for (i, &src) in idx.iter().enumerate() {
                        out[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(&gd[i * d..(i + 1) * d])
                            .for_each(|(o, g)| *o += g);
                    }
                });
            }
            Op::Reshape(a) => send(*a, like(*a, gd.to_vec())),
            Op::L2NormalizeRows(a, eps) => {
                let d = y.cols().max(1);
                let xv = val(*a).data();
                let mut out = Vec::with_capacity(gd.len());
                for ((xr, yr), gr) in xv.chunks(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let norm = (xr.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
                }
                send(*a, like(*a, out));
            }
            Op::NormalizeRowSum(a) => {
                let d = y.cols().max(1);
                let xv = val(*a).data();
                let mut out = Vec::with_capacity(gd.len());
                for ((xr, yr), gr) in xv.chunks(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    out.extend(gr.iter().map(|g| (g - dot) / s));
                }
                send(*a, like(*a, out));
            }
            Op::SegmentMaxMean(c, row_segs, arg) => {
                let cols = val(*c).cols();
                let by = y.cols();
                let mut out = vec![0.0; val(*c).len()];
                for (i, &(rs, rl)) in row_segs.iter().enumerate() {
                    for j in 0..by {
                        let gij = gd[i * by + j] / rl as f64;
                        for r in rs..rs + rl {
                            out[r * cols + arg[r * by + j]] += gij;
                        }
                    }
                }
                send(*c, like(*c, out));
            }
            Op::Diag(a) => {
                let n = y.rows();
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    out[i * n + i] = gd[i];
                }
                send(*a, like(*a, out));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(build: impl Fn(&mut Graph, Var) -> Var, x: f64) -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::scalar(x));
        let loss = build(&mut g, xv);
        let grads = g.backward(loss).unwrap();
        grads.get(xv).unwrap().item()
    }

    #[test]
    fn square_gradient() {
        assert_eq!(scalar_grad(|g, x| g.mul(x, x).unwrap(), 3.0), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        assert_eq!(scalar_grad(|g, x| g.tanh(x), 0.0), 1.0);
    }

    #[test]
    fn softmax_symmetric_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(0.7));
        let b = g.leaf(Tensor::scalar(0.7));
        let ab = g.concat_cols(&[a, b]).unwrap();
        let s = g.softmax_rows(ab).unwrap();
        let first = g.slice_cols(s, 0, 1).unwrap();
        let grads = g.backward(first).unwrap();
        assert!((grads.get(a).unwrap().item() - 0.25).abs() < 1e-15);
        assert!((grads.get(b).unwrap().item() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_nan() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-1.0));
        let l = g.log(x);
        assert!(matches!(g.backward(l), Err(Error::Numeric(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.leaf(Tensor::scalar(2.0));
        let l = g.square(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn matmul_shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Contract(_))));
    }
}
