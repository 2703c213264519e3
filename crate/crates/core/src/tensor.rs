//! Dense 64-bit matrices and a per-forward-pass tape for reverse-mode
//! automatic differentiation.
//!
//! Every value on the tape is a row-major 2-D [`Matrix`]; vectors are
//! represented as `1 × n` rows. Operations are recorded as they run and
//! [`Tape::backward`] walks them in reverse, returning a [`Gradients`]
//! table. The tape itself is never mutated by `backward`, so repeated
//! passes over the same recording produce identical results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 output, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("index {index} out of range for {op} with {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Invalid("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// An `n × 1` column vector.
    pub fn col_vector(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSum(Var),
    RowMean(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    ColAffine(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Antoine { params: Var, owner: Vec<usize>, temps: Vec<f64>, floored: Vec<bool> },
    Mse(Var, Vec<f64>),
    Mae(Var, Vec<f64>),
    Huber(Var, Vec<f64>, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Per-column batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Smallest admissible `C + T` inside the differentiable Antoine op.
pub const ANTOINE_DENOMINATOR_FLOOR: f64 = 1.0;

/// Recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Named trainable leaves in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: &Matrix) -> Result<Var> {
        let v = self.push(value.clone(), Op::Leaf, "param")?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        Matrix { rows: va.rows, cols: va.cols, data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn check_row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(TensorError::ShapeMismatch { op, left: sx, right: sr });
        }
        Ok(())
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_broadcast("add_row", x, row)?;
        let r = self.value(row).data.clone();
        let mut out = self.value(x).clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// Multiplies every row of `x` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_broadcast("mul_row", x, row)?;
        let r = self.value(row).data.clone();
        let mut out = self.value(x).clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(x, row), "mul_row")
    }

    /// Scales row `i` of `x` by the single entry of row `i` of the `r × 1` column `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x), self.shape(col));
        if sc != (sx.0, 1) {
            return Err(TensorError::ShapeMismatch { op: "mul_col", left: sx, right: sc });
        }
        let c = self.value(col).data.clone();
        let mut out = self.value(x).clone();
        for (i, s) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        self.push(out, Op::MulCol(x, col), "mul_col")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Vertical stacking; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", left: self.shape(parts[0]), right: v.shape() });
            }
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Sum over rows: `r × c` to `1 × c`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, &a) in out.data.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        self.push(out, Op::RowSum(x), "row_sum")
    }

    /// Mean over rows: `r × c` to `1 × c`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rows == 0 {
            return Err(TensorError::Invalid("row_mean of zero rows".into()));
        }
        let n = v.rows as f64;
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, &a) in out.data.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::RowMean(x), "row_mean")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x), "elu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// `out[r][c] = x[r][c] * scale[c] + shift[c]` with constant column coefficients.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let cols = self.shape(x).1;
        if scale.len() != cols || shift.len() != cols {
            return Err(TensorError::ShapeMismatch { op: "col_affine", left: self.shape(x), right: (1, scale.len()) });
        }
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * scale[c] + shift[c];
            }
        }
        self.push(out, Op::ColAffine(x, scale.to_vec()), "col_affine")
    }

    /// Picks rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut out = Matrix::zeros(index.len(), v.cols);
        for (o, &i) in index.iter().enumerate() {
            if i >= v.rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: v.rows });
            }
            out.row_mut(o).copy_from_slice(v.row(i));
        }
        self.push(out, Op::GatherRows(x, index.to_vec()), "gather_rows")
    }

    /// Sums row `k` of `x` into output row `target[k]`; output has `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, target: &[usize], out_rows: usize) -> Result<Var> {
        let v = self.value(x);
        if target.len() != v.rows {
            return Err(TensorError::ShapeMismatch { op: "scatter_add_rows", left: v.shape(), right: (target.len(), 1) });
        }
        let mut out = Matrix::zeros(out_rows, v.cols);
        for (k, &t) in target.iter().enumerate() {
            if t >= out_rows {
                return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: t, len: out_rows });
            }
            for (o, &a) in out.row_mut(t).iter_mut().zip(v.row(k)) {
                *o += a;
            }
        }
        self.push(out, Op::ScatterAddRows(x, target.to_vec()), "scatter_add_rows")
    }

    /// Softmax of an `m × 1` score column within groups sharing `segment[k]`.
    pub fn segment_softmax(&mut self, scores: Var, segment: &[usize]) -> Result<Var> {
        let v = self.value(scores);
        if v.cols != 1 || v.rows != segment.len() {
            return Err(TensorError::ShapeMismatch { op: "segment_softmax", left: v.shape(), right: (segment.len(), 1) });
        }
        let nseg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (k, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(v.data[k]);
        }
        let mut out: Vec<f64> = segment.iter().enumerate().map(|(k, &s)| (v.data[k] - max[s]).exp()).collect();
        let mut denom = vec![0.0; nseg];
        for (k, &s) in segment.iter().enumerate() {
            denom[s] += out[k];
        }
        for (k, &s) in segment.iter().enumerate() {
            out[k] /= denom[s];
        }
        let out = Matrix::col_vector(&out);
        self.push(out, Op::SegmentSoftmax(scores, segment.to_vec()), "segment_softmax")
    }

    /// Training-mode batch normalization over rows with learnable `1 × c`
    /// scale and shift. Returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        self.check_row_broadcast("batch_norm", x, gamma)?;
        self.check_row_broadcast("batch_norm", x, beta)?;
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if rows < 2 {
            return Err(TensorError::BatchTooSmall(rows));
        }
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, &a) in mean.iter_mut().zip(v.row(r)) {
                *m += a;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (c, &a) in v.row(r).iter().enumerate() {
                var[c] += (a - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = v.clone();
        for r in 0..rows {
            for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (*o - mean[c]) * inv_std[c];
            }
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        let stats = BatchStats { mean, var, rows };
        let var_out = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, "batch_norm")?;
        Ok((var_out, stats))
    }

    /// Antoine equation evaluated per data point: `ln p_k = A - B / (C + T_k)`
    /// using row `owner[k]` of the `b × 3` parameter matrix `(A, B, C)`.
    ///
    /// `C + T` is floored at [`ANTOINE_DENOMINATOR_FLOOR`]; at the floor the
    /// derivative with respect to `C` is zero.
    pub fn antoine_ln_p(&mut self, params: Var, owner: &[usize], temps: &[f64]) -> Result<Var> {
        let p = self.value(params);
        if p.cols != 3 || owner.len() != temps.len() {
            return Err(TensorError::ShapeMismatch { op: "antoine_ln_p", left: p.shape(), right: (owner.len(), temps.len()) });
        }
        let mut out = Vec::with_capacity(owner.len());
        let mut floored = Vec::with_capacity(owner.len());
        for (&o, &t) in owner.iter().zip(temps) {
            if o >= p.rows {
                return Err(TensorError::IndexOutOfRange { op: "antoine_ln_p", index: o, len: p.rows });
            }
            let (a, b, c) = (p.get(o, 0), p.get(o, 1), p.get(o, 2));
            let den = c + t;
            let low = den < ANTOINE_DENOMINATOR_FLOOR;
            floored.push(low);
            out.push(a - b / den.max(ANTOINE_DENOMINATOR_FLOOR));
        }
        self.push(Matrix::col_vector(&out), Op::Antoine { params, owner: owner.to_vec(), temps: temps.to_vec(), floored }, "antoine_ln_p")
    }

    fn check_target(&self, op: &'static str, pred: Var, target: &[f64]) -> Result<()> {
        let n = self.value(pred).len();
        if n != target.len() {
            return Err(TensorError::ShapeMismatch { op, left: self.shape(pred), right: (target.len(), 1) });
        }
        if n == 0 {
            return Err(TensorError::Invalid(format!("{op} of an empty batch")));
        }
        Ok(())
    }

    /// Mean squared error against a constant target; `1 × 1` output.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        self.check_target("mse_loss", pred, target)?;
        let v = &self.value(pred).data;
        let loss = v.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / v.len() as f64;
        self.push(Matrix::filled(1, 1, loss), Op::Mse(pred, target.to_vec()), "mse_loss")
    }

    /// Mean absolute error against a constant target; `1 × 1` output.
    pub fn mae_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        self.check_target("mae_loss", pred, target)?;
        let v = &self.value(pred).data;
        let loss = v.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / v.len() as f64;
        self.push(Matrix::filled(1, 1, loss), Op::Mae(pred, target.to_vec()), "mae_loss")
    }

    /// Mean Huber loss with threshold `delta`; `1 × 1` output.
    pub fn huber_loss(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        self.check_target("huber_loss", pred, target)?;
        if delta <= 0.0 {
            return Err(TensorError::Invalid("huber delta must be positive".into()));
        }
        let v = &self.value(pred).data;
        let loss = v.iter().zip(target).map(|(p, t)| huber(p - t, delta)).sum::<f64>() / v.len() as f64;
        self.push(Matrix::filled(1, 1, loss), Op::Huber(pred, target.to_vec(), delta), "huber_loss")
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                acc(*a, g.matmul(&vb.transpose()).expect("matmul grad"));
                acc(*b, va.transpose().matmul(g).expect("matmul grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(g, vb, |x, y| x * y));
                acc(*b, elementwise(g, va, |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(x, row) => {
                let vx = self.value(*x);
                let r = &self.value(*row).data;
                let mut gx = g.clone();
                let mut gr = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        gx.set(i, c, g.get(i, c) * r[c]);
                        gr.data[c] += g.get(i, c) * vx.get(i, c);
                    }
                }
                acc(*x, gx);
                acc(*row, gr);
            }
            Op::MulCol(x, col) => {
                let vx = self.value(*x);
                let c = &self.value(*col).data;
                let mut gx = g.clone();
                let mut gc = Matrix::zeros(g.rows, 1);
                for i in 0..g.rows {
                    let mut s = 0.0;
                    for j in 0..g.cols {
                        gx.set(i, j, g.get(i, j) * c[i]);
                        s += g.get(i, j) * vx.get(i, j);
                    }
                    gc.data[i] = s;
                }
                acc(*x, gx);
                acc(*col, gc);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut gp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    acc(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let data = g.data[offset * cols..(offset + rows) * cols].to_vec();
                    offset += rows;
                    acc(p, Matrix { rows, cols, data });
                }
            }
            Op::RowSum(x) => {
                let rows = self.shape(*x).0;
                acc(*x, broadcast_rows(g, rows, 1.0));
            }
            Op::RowMean(x) => {
                let rows = self.shape(*x).0;
                acc(*x, broadcast_rows(g, rows, 1.0 / rows as f64));
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                acc(*x, elementwise(g, vx, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
            }
            Op::Elu(x) => {
                let vx = self.value(*x);
                acc(*x, elementwise(g, vx, |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }));
            }
            Op::Sigmoid(x) => {
                acc(*x, elementwise(g, &node.value, |gv, y| gv * y * (1.0 - y)));
            }
            Op::ColAffine(x, scale) => {
                let mut gx = g.clone();
                for r in 0..gx.rows {
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o *= scale[c];
                    }
                }
                acc(*x, gx);
            }
            Op::GatherRows(x, index) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for (o, &i) in index.iter().enumerate() {
                    for (d, &s) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
            Op::ScatterAddRows(x, target) => {
                let cols = g.cols;
                let mut gx = Matrix::zeros(target.len(), cols);
                for (k, &t) in target.iter().enumerate() {
                    gx.row_mut(k).copy_from_slice(g.row(t));
                }
                acc(*x, gx);
            }
            Op::SegmentSoftmax(x, segment) => {
                let y = &node.value.data;
                let nseg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for (k, &s) in segment.iter().enumerate() {
                    dot[s] += y[k] * g.data[k];
                }
                let data = segment.iter().enumerate().map(|(k, &s)| y[k] * (g.data[k] - dot[s])).collect();
                acc(*x, Matrix { rows: y.len(), cols: 1, data });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let n = rows as f64;
                let gam = &self.value(*gamma).data;
                let mut g_gamma = Matrix::zeros(1, cols);
                let mut g_beta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        g_gamma.data[c] += g.get(r, c) * xhat.get(r, c);
                        g_beta.data[c] += g.get(r, c);
                    }
                }
                let mut gx = Matrix::zeros(rows, cols);
                for c in 0..cols {
                    let k = gam[c] * inv_std[c] / n;
                    for r in 0..rows {
                        let v = n * g.get(r, c) - g_beta.data[c] - xhat.get(r, c) * g_gamma.data[c];
                        gx.set(r, c, k * v);
                    }
                }
                acc(*x, gx);
                acc(*gamma, g_gamma);
                acc(*beta, g_beta);
            }
            Op::Antoine { params, owner, temps, floored } => {
                let p = self.value(*params);
                let mut gp = Matrix::zeros(p.rows, 3);
                for (k, (&o, &t)) in owner.iter().zip(temps).enumerate() {
                    let gk = g.data[k];
                    let (b, c) = (p.get(o, 1), p.get(o, 2));
                    let den = (c + t).max(ANTOINE_DENOMINATOR_FLOOR);
                    gp.data[o * 3] += gk;
                    gp.data[o * 3 + 1] -= gk / den;
                    if !floored[k] {
                        gp.data[o * 3 + 2] += gk * b / (den * den);
                    }
                }
                acc(*params, gp);
            }
            Op::Mse(pred, target) => {
                let v = self.value(*pred);
                let n = target.len() as f64;
                let s = g.data[0];
                let data = v.data.iter().zip(target).map(|(p, t)| s * 2.0 * (p - t) / n).collect();
                acc(*pred, Matrix { rows: v.rows, cols: v.cols, data });
            }
            Op::Mae(pred, target) => {
                let v = self.value(*pred);
                let n = target.len() as f64;
                let s = g.data[0];
                let data = v.data.iter().zip(target).map(|(p, t)| s * sign(p - t) / n).collect();
                acc(*pred, Matrix { rows: v.rows, cols: v.cols, data });
            }
            Op::Huber(pred, target, delta) => {
                let v = self.value(*pred);
                let n = target.len() as f64;
                let s = g.data[0];
                let data = v.data.iter().zip(target).map(|(p, t)| s * huber_derivative(p - t, *delta) / n).collect();
                acc(*pred, Matrix { rows: v.rows, cols: v.cols, data });
            }
        }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Matrix::zeros(r, c)
        })
    }
}

/// Worst relative disagreement between reverse-mode gradients of a scalar
/// `build` and central differences with step `h`, over every entry of every
/// input. Relative error is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_error(inputs: &[Matrix], h: f64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().enumerate().map(|(i, m)| tape.param(format!("x{i}"), m)).collect::<Result<Vec<Var>>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[i]);
        for k in 0..m.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = inputs.to_vec();
                perturbed[i].as_mut_slice()[k] += delta;
                let mut t = Tape::new();
                let vs = perturbed.iter().map(|p| t.constant(p.clone())).collect::<Result<Vec<Var>>>()?;
                let o = build(&mut t, &vs)?;
                Ok(t.value(o).get(0, 0))
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic.as_slice()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-residual Huber penalty.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * sign(r)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn broadcast_rows(g: &Matrix, rows: usize, factor: f64) -> Matrix {
    let mut out = Matrix::zeros(rows, g.cols);
    for r in 0..rows {
        for (o, &v) in out.row_mut(r).iter_mut().zip(&g.data) {
            *o = v * factor;
        }
    }
    out
}
