//! Dense row-major matrix of 64-bit floats plus the kernels every layer is
//! assembled from. Each differentiable kernel has a backward rule defined
//! next to it so layers can wire explicit gradients without a tape.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense 2-D array of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(alloc::format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Config(alloc::format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Config("matrix needs at least one row and column".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Config("ragged rows in matrix literal".into()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Seeded uniform initialization over `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn uniform_init(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let data = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op: "add_assign", left: self.shape(), right: other.shape() });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    /// Broadcasts a `1 x cols` row vector over every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape { op: "add_row", left: self.shape(), right: row.shape() });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sums over rows, returning a `1 x cols` vector.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op, left: self.shape(), right: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn tanh_ew(&self) -> Matrix {
        self.map(libm::tanh)
    }

    pub fn relu_ew(&self) -> Matrix {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    /// GELU in the exact Gaussian-CDF form `x * Phi(x)`.
    pub fn gelu_ew(&self) -> Matrix {
        self.map(gelu_scalar)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        out
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&self, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
        Ok(self.layer_norm_rows_cached(gain, bias, eps)?.0)
    }

    pub fn layer_norm_rows_cached(
        &self,
        gain: &Matrix,
        bias: &Matrix,
        eps: f64,
    ) -> Result<(Matrix, LayerNormCache)> {
        if gain.rows != 1 || gain.cols != self.cols {
            return Err(Error::Shape { op: "layer_norm gain", left: self.shape(), right: gain.shape() });
        }
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape { op: "layer_norm bias", left: self.shape(), right: bias.shape() });
        }
        let d = self.cols as f64;
        let mut xhat = Matrix::zeros(self.rows, self.cols);
        let mut inv_std = Vec::with_capacity(self.rows);
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let istd = 1.0 / libm::sqrt(var + eps);
            inv_std.push(istd);
            for j in 0..self.cols {
                let h = (row[j] - mean) * istd;
                xhat[(r, j)] = h;
                out[(r, j)] = gain.data[j] * h + bias.data[j];
            }
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub fn gaussian_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Column concatenation of matrices sharing a row count.
pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let first = parts.first().ok_or(Error::Config(alloc::string::String::from(
        "concat_cols needs at least one part",
    )))?;
    let rows = first.rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, total);
    let mut offset = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(Error::Shape { op: "concat_cols", left: first.shape(), right: p.shape() });
        }
        for r in 0..rows {
            out.row_mut(r)[offset..offset + p.cols()].copy_from_slice(p.row(r));
        }
        offset += p.cols();
    }
    Ok(out)
}

/// Inverse of [`concat_cols`]: splits columns into blocks of the given widths.
pub fn split_cols(x: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = widths.iter().sum();
    if total != x.cols() {
        return Err(Error::Config(alloc::format!(
            "split widths sum to {total} but matrix has {} columns",
            x.cols()
        )));
    }
    let mut parts = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &w in widths {
        let mut part = Matrix::zeros(x.rows(), w);
        for r in 0..x.rows() {
            part.row_mut(r).copy_from_slice(&x.row(r)[offset..offset + w]);
        }
        parts.push(part);
        offset += w;
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

/// Backward of row softmax given its output `y` and upstream `dy`:
/// `dx_i = y_i * (dy_i - sum_j dy_j y_j)` per row.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape { op: "softmax_backward", left: y.shape(), right: dy.shape() });
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..y.cols() {
            dx[(r, j)] = yr[j] * (dyr[j] - dot);
        }
    }
    Ok(dx)
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    dy.zip_with(y, "tanh_backward", |g, t| g * (1.0 - t * t))
}

/// Backward of relu given its input `x`.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    dy.zip_with(x, "relu_backward", |g, v| if v > 0.0 { g } else { 0.0 })
}

/// Backward of GELU given its input `x`: `d/dx = Phi(x) + x * phi(x)`.
pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    dy.zip_with(x, "gelu_backward", |g, v| g * (gaussian_cdf(v) + v * gaussian_pdf(v)))
}

pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Backward of row layer norm. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gain: &Matrix,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let xhat = &cache.xhat;
    if xhat.shape() != dy.shape() {
        return Err(Error::Shape { op: "layer_norm_backward", left: xhat.shape(), right: dy.shape() });
    }
    let d = xhat.cols() as f64;
    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
    let mut dgain = Matrix::zeros(1, xhat.cols());
    let mut dbias = Matrix::zeros(1, xhat.cols());
    for r in 0..xhat.rows() {
        let istd = cache.inv_std[r];
        let hr = xhat.row(r);
        let dyr = dy.row(r);
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..xhat.cols() {
            let dh = dyr[j] * gain.data[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
            dgain.data[j] += dyr[j] * hr[j];
            dbias.data[j] += dyr[j];
        }
        mean_dh /= d;
        mean_dh_h /= d;
        for j in 0..xhat.cols() {
            let dh = dyr[j] * gain.data[j];
            dx[(r, j)] = istd * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    Ok((dx, dgain, dbias))
}
