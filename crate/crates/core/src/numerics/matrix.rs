use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LabError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack row blocks vertically.
    pub fn vstack(blocks: &[Matrix]) -> Result<Self> {
        let cols = blocks.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(LabError::Shape(format!(
                    "vstack: {} columns vs {cols}",
                    b.cols
                )));
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn ensure_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · otherᵀ`, i.e. `[m×k]·[n×k]ᵀ -> [m×n]`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LabError::Shape(format!(
                "matmul_nt: inner dims {} vs {}",
                self.cols, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            View::new(&self.data, k as isize, 1),
            View::new(&other.data, 1, k as isize),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other`, i.e. `[k×m]ᵀ·[k×n] -> [m×n]`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LabError::Shape(format!(
                "matmul_tn: inner dims {} vs {}",
                self.rows, other.rows
            )));
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            View::new(&self.data, 1, m as isize),
            View::new(&other.data, n as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · other`, i.e. `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LabError::Shape(format!(
                "matmul: inner dims {} vs {}",
                self.cols, other.rows
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            View::new(&self.data, k as isize, 1),
            View::new(&other.data, n as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// Elementwise `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Matrix, b: f64) -> Result<Matrix> {
        self.ensure_same_shape(other, "lincomb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Sum of each column, accumulated in row order.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }
}

struct View<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f64], row_stride: isize, col_stride: isize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }
}

fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    debug_assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    // SAFETY: the views cover exactly m×k and k×n elements with the given
    // strides (checked by the callers' shape tests) and `c` is m×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
