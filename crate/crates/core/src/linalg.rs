//! Minimal dense linear algebra for the finite-size oracles: row-major
//! matrices, cache-friendly multiply, and Cholesky factorization for the
//! Gaussian likelihood and LMMSE computations. Sizes stay in the hundreds,
//! so nothing fancier is warranted.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// self * other, ikj loop order.
    pub fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// B += scale * self * self^T, for symmetric accumulation.
    pub fn add_scaled_gram_to(&self, scale: f64, acc: &mut Mat) {
        debug_assert_eq!(acc.rows, self.rows);
        debug_assert_eq!(acc.cols, self.rows);
        for i in 0..self.rows {
            let a = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in i..self.rows {
                let b = &self.data[j * self.cols..(j + 1) * self.cols];
                let v = scale * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                acc.data[i * acc.cols + j] += v;
                if i != j {
                    acc.data[j * acc.cols + i] += v;
                }
            }
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub(crate) struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(a: &Mat) -> Result<Self> {
        debug_assert_eq!(a.rows, a.cols);
        let n = a.rows;
        let mut l = a.data.clone();
        for j in 0..n {
            let mut diag = l[j * n + j];
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::OracleUnsupported(format!(
                    "covariance is not positive definite (pivot {diag:.3e} at column {j})"
                )));
            }
            let diag = diag.sqrt();
            l[j * n + j] = diag;
            for i in (j + 1)..n {
                let mut v = l[i * n + j];
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / diag;
            }
            for k in (j + 1)..n {
                l[j * n + k] = 0.0;
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let head: f64 = self.l[i * n..i * n + i]
                .iter()
                .zip(&x[..i])
                .map(|(a, b)| a * b)
                .sum();
            x[i] = (x[i] - head) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let tail: f64 = (i + 1..n).map(|k| self.l[k * n + i] * x[k]).sum();
            x[i] = (x[i] - tail) / self.l[i * n + i];
        }
        x
    }

    /// log det A = 2 sum log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.l[i * self.n + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Gaussian log-density log N(y | mean, A).
    pub fn gaussian_log_density(&self, y: &[f64], mean: &[f64]) -> f64 {
        let r: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
        let s = self.solve(&r);
        let quad: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum();
        -0.5 * (quad + self.log_det() + self.n as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}
