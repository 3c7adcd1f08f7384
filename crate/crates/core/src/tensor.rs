//! Dense row-major matrices with a tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Tape::backward`]
//! walks the records in reverse. Gradients live on the tape, not on the
//! tensors; calling `backward` again without [`Tape::zero_grad`] adds to the
//! stored gradients.

use serde::{Deserialize, Serialize};

use crate::blackvol::{norm_cdf, norm_pdf};
use crate::error::{Error, Result};

/// A 2-D matrix of doubles in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch { op: "from_vec", lhs: (rows, cols), rhs: (data.len(), 1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch { op: "from_rows", lhs: (rows.len(), cols), rhs: (1, r.len()) });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: self.shape(), rhs: other.shape() });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm_nn(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// c[m x n] += a[m x k] * b[k x n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, c, m, k, n);
}

/// c[m x n] += a[m x k] * b[n x k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_strided(a, k, 1, &bt, c, m, k, n);
}

/// c[m x n] += a[k x m]^T * b[k x n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, c, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;

/// c[m x n] += A * b[k x n] with `A(i, p) = a[i * rs + p * cs]`.
///
/// Every output element starts from its current value and adds the `p` terms
/// in ascending order, whatever the blocking, so results do not depend on the
/// shape of the surrounding matrices.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_strided_avx2(a, rs, cs, b, c, m, k, n) };
        return;
    }
    gemm_kernel(a, rs, cs, b, c, m, k, n);
}

/// The same kernel compiled with wider vectors. Rust never fuses multiply-add
/// on its own, so both versions round identically.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided_avx2(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_kernel(a, rs, cs, b, c, m, k, n);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_kernel(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(b.len() >= k * n && c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * rs + (k - 1) * cs);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("block");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + p * cs];
                    for s in 0..NR {
                        row[s] += av * bp[s];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_row(a, rs, cs, b, c, r, j, k, n);
        }
        i += MR;
    }
    for r in i..m {
        gemm_row(a, rs, cs, b, c, r, 0, k, n);
    }
}

/// Columns `j0..n` of output row `r`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_row(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], r: usize, j0: usize, k: usize, n: usize) {
    if j0 >= n {
        return;
    }
    let c_row = &mut c[r * n + j0..(r + 1) * n];
    for p in 0..k {
        let av = a[r * rs + p * cs];
        for (cv, bv) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
            *cv += av * bv;
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    RowSoftmax(Var),
    /// `cache` holds the normalised input followed by one inverse std per row.
    LayerNorm { x: Var, gain: Var, bias: Var, cache: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of operations for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor { rows: r, cols: c, data: g.to_vec() },
            None => Tensor::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor { rows: src.rows, cols: src.cols, data: src.data.iter().map(|&v| f(v)).collect() };
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { rows: va.rows, cols: va.cols, data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.cols {
            return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: va.shape(), rhs: vb.shape() });
        }
        let mut out = Tensor::zeros(va.rows, vb.rows);
        gemm_nt(&va.data, &vb.data, &mut out.data, va.rows, va.cols, vb.rows);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(value, Op::Transpose(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows != 1 || vr.cols != vx.cols {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: vx.shape(), rhs: vr.shape() });
        }
        let mut out = vx.clone();
        for r in out.data.chunks_mut(vx.cols.max(1)) {
            for (o, b) in r.iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    /// Elementwise clamp; gradients pass only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: (rows, cols), rhs: s });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols != cols {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: (rows, cols), rhs: v.shape() });
            }
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if start >= end || end > v.cols {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: v.shape(), rhs: (start, end) });
        }
        let w = end - start;
        let mut out = Tensor::zeros(v.rows, w);
        for r in 0..v.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&v.row(r)[start..end]);
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, start, end), needs))
    }

    /// Softmax along each row, with row-max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        for row in out.data.chunks_mut(v.cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::RowSoftmax(x), needs)
    }

    /// Row-wise layer normalisation followed by a per-column gain and bias (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols;
        if vg.shape() != (1, n) || vb.shape() != (1, n) {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: vx.shape(), rhs: vg.shape() });
        }
        let mut out = Tensor::zeros(vx.rows, n);
        let mut cache = vec![0.0; vx.rows * n + vx.rows];
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            cache[vx.rows * n + r] = inv_std;
            for c in 0..n {
                let xhat = (row[c] - mean) * inv_std;
                cache[r * n + c] = xhat;
                out.data[r * n + c] = xhat * vg.data[c] + vb.data[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Reverse-mode pass from a scalar `loss`, adding into stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut accumulate = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate(*a, &|s| gemm_nt(g, &vb.data, s, va.rows, vb.cols, vb.rows));
                accumulate(*b, &|s| gemm_tn(&va.data, g, s, va.rows, va.cols, vb.cols));
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate(*a, &|s| gemm_nn(g, &vb.data, s, va.rows, vb.rows, va.cols));
                accumulate(*b, &|s| gemm_tn(g, &va.data, s, va.rows, vb.rows, va.cols));
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows, out.cols);
                accumulate(*x, &|s| {
                    for a in 0..r {
                        for b in 0..c {
                            s[b * r + a] += g[a * c + b];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(*a, &|s| add_into(s, g));
                accumulate(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                accumulate(*a, &|s| add_into(s, g));
                accumulate(*b, &|s| s.iter_mut().zip(g).for_each(|(e, v)| *e -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                accumulate(*a, &|s| {
                    for ((e, gv), bv) in s.iter_mut().zip(g).zip(vb) {
                        *e += gv * bv;
                    }
                });
                accumulate(*b, &|s| {
                    for ((e, gv), av) in s.iter_mut().zip(g).zip(va) {
                        *e += gv * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let cols = out.cols;
                accumulate(*x, &|s| add_into(s, g));
                accumulate(*row, &|s| {
                    for r in g.chunks(cols.max(1)) {
                        add_into(s, r);
                    }
                });
            }
            Op::Scale(x, c) => accumulate(*x, &|s| s.iter_mut().zip(g).for_each(|(e, v)| *e += c * v)),
            Op::AddScalar(x) => accumulate(*x, &|s| add_into(s, g)),
            Op::Exp(x) => accumulate(*x, &|s| {
                for ((e, gv), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *e += gv * y;
                }
            }),
            Op::Log(x) => {
                let vx = &nodes[x.0].value.data;
                accumulate(*x, &|s| {
                    for ((e, gv), xv) in s.iter_mut().zip(g).zip(vx) {
                        *e += gv / xv;
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &nodes[x.0].value.data;
                accumulate(*x, &|s| {
                    for ((e, gv), &xv) in s.iter_mut().zip(g).zip(vx) {
                        *e += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = &nodes[x.0].value.data;
                accumulate(*x, &|s| {
                    for ((e, gv), xv) in s.iter_mut().zip(g).zip(vx) {
                        if *xv >= *lo && *xv <= *hi {
                            *e += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols;
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols;
                    accumulate(*p, &|s| {
                        for r in 0..out.rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    accumulate(*p, &|s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(x, start, end) => {
                let src_cols = nodes[x.0].value.cols;
                let w = end - start;
                accumulate(*x, &|s| {
                    for r in 0..out.rows {
                        add_into(&mut s[r * src_cols + start..r * src_cols + end], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let cols = out.cols;
                accumulate(*x, &|s| {
                    for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data.chunks(cols)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((e, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *e += y * (gv - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (rows, n) = (out.rows, out.cols);
                let gain_v = &nodes[gain.0].value.data;
                let xhat = &cache[..rows * n];
                let inv_std = &cache[rows * n..];
                accumulate(*x, &|s| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gain_v[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            s[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                });
                accumulate(*gain, &|s| {
                    for r in 0..rows {
                        for c in 0..n {
                            s[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                accumulate(*bias, &|s| {
                    for r in g.chunks(n) {
                        add_into(s, r);
                    }
                });
            }
            Op::Sum(x) => accumulate(*x, &|s| s.iter_mut().for_each(|e| *e += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                accumulate(*x, &|s| s.iter_mut().for_each(|e| *e += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
