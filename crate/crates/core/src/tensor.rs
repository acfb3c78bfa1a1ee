//! Dense row-major matrices and the few numerical primitives the pipeline needs.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parallel;

/// Dense row-major matrix of `f64`.
///
/// Always at least 1x1 and always finite when built through [`Matrix::new`].
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols)).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape { rows, cols, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape { rows: rows.len(), cols, len: data.len() + r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds an `rows x cols` matrix from a generator closure.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
        Self::from_fn(rows, cols, |_, _| dist.sample(rng))
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the raw storage. Callers are responsible for keeping values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("add", other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "add_row_vector",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sum over rows, one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(&other.data[p * m..(p + 1) * m]) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch { op: "matmul_t", left: self.shape(), right: other.shape() });
        }
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(Matrix::from_raw(self.rows, other.rows, out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch { op: "t_matmul", left: self.shape(), right: other.shape() });
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// New matrix whose column `i` is column `index[i]` of `self`.
    pub fn gather_cols(&self, index: &[usize]) -> Result<Matrix> {
        if index.is_empty() {
            return Err(Error::InvalidShape { rows: self.rows, cols: 0, len: 0 });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= self.cols) {
            return Err(Error::IndexOutOfRange { index: bad, bound: self.cols });
        }
        let mut out = Vec::with_capacity(self.rows * index.len());
        for i in 0..self.rows {
            let row = self.row(i);
            out.extend(index.iter().map(|&j| row[j]));
        }
        Ok(Matrix::from_raw(self.rows, index.len(), out))
    }

    /// New matrix whose row `i` is row `index[i]` of `self`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Matrix> {
        if index.is_empty() {
            return Err(Error::InvalidShape { rows: 0, cols: self.cols, len: 0 });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= self.rows) {
            return Err(Error::IndexOutOfRange { index: bad, bound: self.rows });
        }
        let mut out = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            out.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(index.len(), self.cols, out))
    }
}

#[inline]
/// Four interleaved partial sums, so the compiler can vectorize while the
/// summation order stays fixed.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dot` of four columns against one, with the same per-entry summation order.
fn dot4(a: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let n = b.len();
    let split = n - n % 4;
    let mut acc = [[0.0f64; 4]; 4];
    let mut p = 0;
    while p < split {
        for (r, col) in a.iter().enumerate() {
            for k in 0..4 {
                acc[r][k] += col[p + k] * b[p + k];
            }
        }
        p += 4;
    }
    let mut out = [0.0; 4];
    for (r, col) in a.iter().enumerate() {
        let tail: f64 = col[split..n].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Per-column means and population standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ColumnStats {
    pub fn zero_variance_count(&self) -> usize {
        self.stds.iter().filter(|&&s| s == 0.0).count()
    }
}

/// Mean and population (1/N) standard deviation of every column.
///
/// Constant columns report their value as the mean and exactly zero spread,
/// independent of rounding in the running sum.
pub fn column_stats(m: &Matrix) -> Result<ColumnStats> {
    if m.rows < 2 {
        return Err(Error::TooFewRows { op: "column_stats", needed: 2, got: m.rows });
    }
    let n = m.rows as f64;
    let mut means = Vec::with_capacity(m.cols);
    let mut stds = Vec::with_capacity(m.cols);
    for j in 0..m.cols {
        let col = m.column(j);
        if is_constant(&col) {
            means.push(col[0]);
            stds.push(0.0);
            continue;
        }
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok(ColumnStats { means, stds })
}

fn is_constant(col: &[f64]) -> bool {
    col.iter().all(|&v| v == col[0])
}

/// Column deviations from the mean, stored column-major (one contiguous slice per
/// column) together with each column's deviation norm. Zero norm marks a dead column.
struct Centered {
    n: usize,
    cols: Vec<f64>,
    norms: Vec<f64>,
}

impl Centered {
    fn new(m: &Matrix) -> Self {
        let n = m.rows;
        let mut cols = Vec::with_capacity(m.data.len());
        let mut norms = Vec::with_capacity(m.cols);
        for j in 0..m.cols {
            let col = m.column(j);
            if is_constant(&col) {
                cols.extend(std::iter::repeat_n(0.0, n));
                norms.push(0.0);
                continue;
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            let start = cols.len();
            cols.extend(col.iter().map(|v| v - mean));
            let ss: f64 = cols[start..].iter().map(|d| d * d).sum();
            norms.push(ss.sqrt());
        }
        Self { n, cols, norms }
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }
}

/// Pearson correlation between every column of `xs` and every column of `xt`.
///
/// Entry `(i, j)` correlates column `i` of `xs` with column `j` of `xt`. Pairs
/// involving a zero-variance column are 0. Entries are clamped to `[-1, 1]`.
pub fn pearson_correlation(xs: &Matrix, xt: &Matrix) -> Result<Matrix> {
    pearson_correlation_threaded(xs, xt, 1)
}

/// Same as [`pearson_correlation`], computing output rows on up to `threads`
/// threads. The summation order per entry is fixed, so the result does not
/// depend on `threads`.
pub fn pearson_correlation_threaded(xs: &Matrix, xt: &Matrix, threads: usize) -> Result<Matrix> {
    if xs.rows != xt.rows {
        return Err(Error::RowCountMismatch { left: xs.rows, right: xt.rows });
    }
    if xs.rows < 2 {
        return Err(Error::TooFewRows { op: "pearson_correlation", needed: 2, got: xs.rows });
    }
    let cs = Centered::new(xs);
    let ct = Centered::new(xt);
    // Tiles of four student columns share each pass over a teacher column.
    let tiles: Vec<usize> = (0..xs.cols).step_by(4).collect();
    let out_rows = parallel::map_ordered(&tiles, threads, |&start| {
        let rows: Vec<usize> = (start..(start + 4).min(xs.cols)).collect();
        let mut out = vec![0.0; rows.len() * xt.cols];
        for j in 0..xt.cols {
            let nb = ct.norms[j];
            let b = ct.col(j);
            let sums = if rows.len() == 4 {
                dot4([cs.col(rows[0]), cs.col(rows[1]), cs.col(rows[2]), cs.col(rows[3])], b)
            } else {
                let mut s = [0.0; 4];
                for (r, &i) in rows.iter().enumerate() {
                    s[r] = dot(cs.col(i), b);
                }
                s
            };
            for (r, &i) in rows.iter().enumerate() {
                let na = cs.norms[i];
                out[r * xt.cols + j] = if na == 0.0 || nb == 0.0 { 0.0 } else { (sums[r] / (na * nb)).clamp(-1.0, 1.0) };
            }
        }
        out
    });
    Ok(Matrix::from_raw(xs.cols, xt.cols, out_rows.concat()))
}
