//! Dense numeric kernel: row-major matrices over `f64`, the handful of
//! operations the attention stack needs (matmul, row softmax, 1-D convolution,
//! adaptive max pooling, elementwise nonlinearities), and an explicit analytic
//! backward rule for each of them.
//!
//! There is no autodiff tape; higher layers compose these backward rules by
//! hand. All math is double precision so finite-difference verification is
//! meaningful.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MahaError, Result};

/// A `(length x dim)` sequence representation, row-major.
///
/// Rows index tokens, columns index features. Every public constructor and
/// operation preserves `rows >= 1`, `cols >= 1`, `data.len() == rows * cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SeqMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MahaError::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(MahaError::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        debug_assert!(rows > 0 && cols > 0);
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        debug_assert!(rows > 0 && cols > 0);
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Identity matrix (square).
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(MahaError::Shape("from_rows: empty input".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MahaError::Shape(format!(
                    "from_rows: ragged rows ({} vs {cols})",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn uniformly from `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b, "hadamard")
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64, op: &str) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MahaError::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MahaError::Shape(format!(
                "axpy: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Frobenius inner product `<self, other>`.
    pub fn frob_inner(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MahaError::Shape(format!(
                "frob_inner: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a `NonFinite` error naming `stage` if any entry is NaN/Inf.
    pub fn ensure_finite(&self, stage: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MahaError::NonFinite { stage: stage.to_string() })
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

// ── Matrix products ─────────────────────────────────────────────────

/// `a * b`. Errors with both shapes on an inner-dimension mismatch.
pub fn matmul(a: &SeqMatrix, b: &SeqMatrix) -> Result<SeqMatrix> {
    if a.cols != b.rows {
        return Err(MahaError::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = SeqMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(k);
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &SeqMatrix, b: &SeqMatrix) -> Result<SeqMatrix> {
    if a.cols != b.cols {
        return Err(MahaError::Shape(format!(
            "matmul_nt: {}x{} * ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = SeqMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let br = b.row(j);
            out.data[i * b.rows + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn(a: &SeqMatrix, b: &SeqMatrix) -> Result<SeqMatrix> {
    if a.rows != b.rows {
        return Err(MahaError::Shape(format!(
            "matmul_tn: ({}x{})^T * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = SeqMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let or = out.row_mut(i);
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a * b` w.r.t. both factors: `(g * b^T, a^T * g)`.
pub fn matmul_backward(
    a: &SeqMatrix,
    b: &SeqMatrix,
    grad_out: &SeqMatrix,
) -> Result<(SeqMatrix, SeqMatrix)> {
    let grad_a = matmul_nt(grad_out, b)?;
    let grad_b = matmul_tn(a, grad_out)?;
    Ok((grad_a, grad_b))
}

// ── Row softmax ─────────────────────────────────────────────────────

/// Row-wise softmax with row-max subtraction. Input must be finite.
pub fn softmax_rows(m: &SeqMatrix) -> SeqMatrix {
    debug_assert!(m.is_finite(), "softmax_rows precondition: finite input");
    let mut out = SeqMatrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let or = out.row_mut(i);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Backward rule for softmax given its output `y`:
/// `dx_j = y_j * (dy_j - sum_k dy_k y_k)` per row.
pub fn softmax_rows_backward(y: &SeqMatrix, grad_out: &SeqMatrix) -> Result<SeqMatrix> {
    if y.rows != grad_out.rows || y.cols != grad_out.cols {
        return Err(MahaError::Shape(format!(
            "softmax_rows_backward: {}x{} vs {}x{}",
            y.rows, y.cols, grad_out.rows, grad_out.cols
        )));
    }
    let mut out = SeqMatrix::zeros(y.rows, y.cols);
    for i in 0..y.rows {
        let yr = y.row(i);
        let gr = grad_out.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        let or = out.row_mut(i);
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Ok(out)
}

// ── Elementwise nonlinearities ──────────────────────────────────────

pub fn relu(x: &SeqMatrix) -> SeqMatrix {
    x.map(|v| v.max(0.0))
}

/// Backward for ReLU given the pre-activation input.
pub fn relu_backward(pre: &SeqMatrix, grad_out: &SeqMatrix) -> Result<SeqMatrix> {
    pre.zip_with(grad_out, |p, g| if p > 0.0 { g } else { 0.0 }, "relu_backward")
}

pub fn sigmoid(x: &SeqMatrix) -> SeqMatrix {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward for sigmoid given its output `s`: `ds = s (1 - s) g`.
pub fn sigmoid_backward(sig: &SeqMatrix, grad_out: &SeqMatrix) -> Result<SeqMatrix> {
    sig.zip_with(grad_out, |s, g| s * (1.0 - s) * g, "sigmoid_backward")
}

// ── 1-D convolution ─────────────────────────────────────────────────

/// A `(k x d_in x d_out)` convolution kernel, taps on the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub k: usize,
    pub d_in: usize,
    pub d_out: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(k: usize, d_in: usize, d_out: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * d_in * d_out {
            return Err(MahaError::Shape(format!(
                "kernel data length {} does not match {k}x{d_in}x{d_out}",
                data.len()
            )));
        }
        Ok(Self { k, d_in, d_out, data })
    }

    pub fn zeros(k: usize, d_in: usize, d_out: usize) -> Self {
        Self { k, d_in, d_out, data: vec![0.0; k * d_in * d_out] }
    }

    /// Uniform init scaled by the kernel's fan-in `k * d_in`.
    pub fn init_uniform(k: usize, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / ((k * d_in) as f64).sqrt();
        let data = (0..k * d_in * d_out).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { k, d_in, d_out, data }
    }

    /// Center tap is the identity channel map, all other taps zero.
    /// Passes the input through unchanged at stride 1.
    pub fn center_identity(k: usize, d: usize) -> Self {
        let mut kern = Self::zeros(k, d, d);
        let c = k / 2;
        for i in 0..d {
            *kern.at_mut(c, i, i) = 1.0;
        }
        kern
    }

    #[inline]
    pub fn at(&self, t: usize, i: usize, o: usize) -> f64 {
        self.data[(t * self.d_in + i) * self.d_out + o]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, i: usize, o: usize) -> &mut f64 {
        &mut self.data[(t * self.d_in + i) * self.d_out + o]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn conv1d_check(x: &SeqMatrix, kernel: &ConvKernel, stride: usize, dilation: usize) -> Result<usize> {
    if kernel.k % 2 == 0 {
        return Err(MahaError::Config(format!(
            "conv1d kernel size must be odd, got {}",
            kernel.k
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(MahaError::Config("conv1d stride and dilation must be positive".into()));
    }
    if x.cols != kernel.d_in {
        return Err(MahaError::Shape(format!(
            "conv1d: input dim {} vs kernel d_in {}",
            x.cols, kernel.d_in
        )));
    }
    let out_rows = if stride > 1 { x.rows / stride } else { x.rows };
    if out_rows == 0 {
        return Err(MahaError::Shape(format!(
            "conv1d: stride {stride} too large for {} rows",
            x.rows
        )));
    }
    Ok(out_rows)
}

/// 1-D convolution over the token axis.
///
/// Output position `j` reads input positions `j*stride + (t - (k-1)/2)*dilation`
/// for taps `t = 0..k`; positions outside the sequence contribute zero. At
/// stride 1 this is same-length symmetric zero padding; at stride > 1 the
/// output has `floor(rows/stride)` positions and only the left edge needs
/// padding.
pub fn conv1d(x: &SeqMatrix, kernel: &ConvKernel, stride: usize, dilation: usize) -> Result<SeqMatrix> {
    let out_rows = conv1d_check(x, kernel, stride, dilation)?;
    let half = (kernel.k - 1) / 2;
    let mut out = SeqMatrix::zeros(out_rows, kernel.d_out);
    for j in 0..out_rows {
        for t in 0..kernel.k {
            let pos = (j * stride) as isize + (t as isize - half as isize) * dilation as isize;
            if pos < 0 || pos >= x.rows as isize {
                continue;
            }
            let xr = x.row(pos as usize);
            let or = out.row_mut(j);
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, outv) in or.iter_mut().enumerate() {
                    *outv += xv * kernel.at(t, i, o);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv1d` w.r.t. the input and the kernel.
pub fn conv1d_backward(
    x: &SeqMatrix,
    kernel: &ConvKernel,
    stride: usize,
    dilation: usize,
    grad_out: &SeqMatrix,
) -> Result<(SeqMatrix, ConvKernel)> {
    let out_rows = conv1d_check(x, kernel, stride, dilation)?;
    if grad_out.rows != out_rows || grad_out.cols != kernel.d_out {
        return Err(MahaError::Shape(format!(
            "conv1d_backward: grad {}x{} vs expected {}x{}",
            grad_out.rows, grad_out.cols, out_rows, kernel.d_out
        )));
    }
    let half = (kernel.k - 1) / 2;
    let mut grad_x = SeqMatrix::zeros(x.rows, x.cols);
    let mut grad_k = ConvKernel::zeros(kernel.k, kernel.d_in, kernel.d_out);
    for j in 0..out_rows {
        let gr = grad_out.row(j);
        for t in 0..kernel.k {
            let pos = (j * stride) as isize + (t as isize - half as isize) * dilation as isize;
            if pos < 0 || pos >= x.rows as isize {
                continue;
            }
            let pos = pos as usize;
            for i in 0..kernel.d_in {
                let xv = x.get(pos, i);
                let mut acc = 0.0;
                for (o, &gv) in gr.iter().enumerate() {
                    acc += kernel.at(t, i, o) * gv;
                    *grad_k.at_mut(t, i, o) += xv * gv;
                }
                grad_x.data[pos * x.cols + i] += acc;
            }
        }
    }
    Ok((grad_x, grad_k))
}

// ── Adaptive max pooling ────────────────────────────────────────────

#[inline]
fn pool_window(i: usize, rows: usize, n_out: usize) -> (usize, usize) {
    let start = i * rows / n_out;
    let end = ((i + 1) * rows + n_out - 1) / n_out; // ceil
    (start, end)
}

/// Columnwise max over windows `[floor(i*rows/n_out), ceil((i+1)*rows/n_out))`.
/// The windows jointly cover every input row.
pub fn adaptive_max_pool(x: &SeqMatrix, n_out: usize) -> Result<SeqMatrix> {
    if n_out == 0 || n_out > x.rows {
        return Err(MahaError::Shape(format!(
            "adaptive_max_pool: target length {n_out} not in 1..={}",
            x.rows
        )));
    }
    let mut out = SeqMatrix::zeros(n_out, x.cols);
    for i in 0..n_out {
        let (start, end) = pool_window(i, x.rows, n_out);
        let or = out.row_mut(i);
        for (c, o) in or.iter_mut().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for r in start..end {
                m = m.max(x.get(r, c));
            }
            *o = m;
        }
    }
    Ok(out)
}

/// Routes each output gradient to the first row attaining the window max
/// (deterministic tie-break).
pub fn adaptive_max_pool_backward(
    x: &SeqMatrix,
    n_out: usize,
    grad_out: &SeqMatrix,
) -> Result<SeqMatrix> {
    if grad_out.rows != n_out || grad_out.cols != x.cols {
        return Err(MahaError::Shape(format!(
            "adaptive_max_pool_backward: grad {}x{} vs expected {}x{}",
            grad_out.rows, grad_out.cols, n_out, x.cols
        )));
    }
    let mut grad_x = SeqMatrix::zeros(x.rows, x.cols);
    for i in 0..n_out {
        let (start, end) = pool_window(i, x.rows, n_out);
        for c in 0..x.cols {
            let mut best = start;
            let mut m = x.get(start, c);
            for r in start + 1..end {
                let v = x.get(r, c);
                if v > m {
                    m = v;
                    best = r;
                }
            }
            grad_x.data[best * x.cols + c] += grad_out.get(i, c);
        }
    }
    Ok(grad_x)
}
