//! Symmetric banded linear algebra for lattice precision matrices.
//!
//! The age-year lattice models lead to precision matrices whose graph is the
//! four-neighbour lattice. Ordering the cells with the year index fastest
//! keeps every nonzero within `bandwidth = T` of the diagonal, so a banded
//! Cholesky factorization has no fill outside the band and costs
//! `O(n * bandwidth^2)`.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix not positive definite: pivot {pivot:e} at row {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Symmetric matrix stored by its lower band.
///
/// Entry `(i, j)` with `i >= j` and `i - j <= bandwidth` lives at
/// `data[i * (bandwidth + 1) + (i - j)]`; everything further from the
/// diagonal is structurally zero.
#[derive(Debug, Clone)]
pub struct SymBand {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn idx(&self, i: usize, off: usize) -> usize {
        i * (self.bandwidth + 1) + off
    }

    /// Value at `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bandwidth {
            0.0
        } else {
            self.data[self.idx(hi, hi - lo)]
        }
    }

    /// Set the symmetric pair `(i, j)` and `(j, i)`. Panics outside the band.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(hi - lo <= self.bandwidth, "entry outside band");
        let k = self.idx(hi, hi - lo);
        self.data[k] = value;
    }

    /// Add `value` to the symmetric pair `(i, j)`.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        assert!(hi - lo <= self.bandwidth, "entry outside band");
        let k = self.idx(hi, hi - lo);
        self.data[k] += value;
    }

    /// Add `value` to every diagonal entry.
    pub fn add_diag(&mut self, value: f64) {
        for i in 0..self.n {
            let k = self.idx(i, 0);
            self.data[k] += value;
        }
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            for j in lo..=i {
                let v = self.data[self.idx(i, i - j)];
                if v != 0.0 {
                    y[i] += v * x[j];
                    if j != i {
                        y[j] += v * x[i];
                    }
                }
            }
        }
        y
    }

    /// Dense copy (small problems and test oracles).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            for j in lo..=i {
                let v = self.data[self.idx(i, i - j)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Band capture of a dense symmetric matrix. Panics if any entry outside
    /// the requested band is nonzero.
    pub fn from_dense(m: &DMatrix<f64>, bandwidth: usize) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols());
        let mut b = Self::zeros(n, bandwidth);
        for i in 0..n {
            for j in 0..=i {
                let v = m[(i, j)];
                if i - j > bandwidth {
                    assert_eq!(v, 0.0, "nonzero entry ({i},{j}) outside band");
                } else {
                    b.set(i, j, v);
                }
            }
        }
        b
    }

    /// Banded Cholesky factorization `A = L L'`.
    pub fn cholesky(&self) -> Result<BandCholesky, LinalgError> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut l = vec![0.0; n * (bw + 1)];
        let stride = bw + 1;
        for i in 0..n {
            let jmin = i.saturating_sub(bw);
            for j in jmin..=i {
                let mut s = self.data[i * stride + (i - j)];
                let mmin = jmin.max(j.saturating_sub(bw));
                for m in mmin..j {
                    s -= l[i * stride + (i - m)] * l[j * stride + (j - m)];
                }
                if j < i {
                    l[i * stride + (i - j)] = s / l[j * stride];
                } else {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { index: i, pivot: s });
                    }
                    l[i * stride] = s.sqrt();
                }
            }
        }
        Ok(BandCholesky {
            n,
            bandwidth: bw,
            l,
        })
    }
}

/// Lower-triangular band factor of a positive definite [`SymBand`].
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(&y)
    }

    /// Solve `L y = b` (forward substitution).
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let stride = self.bandwidth + 1;
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut s = b[i];
            let jmin = i.saturating_sub(self.bandwidth);
            for j in jmin..i {
                s -= self.l[i * stride + (i - j)] * y[j];
            }
            y[i] = s / self.l[i * stride];
        }
        y
    }

    /// Solve `L' x = b` (back substitution). Used to turn standard normal
    /// noise into a draw with precision `A`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let stride = self.bandwidth + 1;
        let mut x = vec![0.0; self.n];
        for i in (0..self.n).rev() {
            let mut s = b[i];
            let jmax = (i + self.bandwidth).min(self.n - 1);
            for j in (i + 1)..=jmax {
                s -= self.l[j * stride + (j - i)] * x[j];
            }
            x[i] = s / self.l[i * stride];
        }
        x
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        let stride = self.bandwidth + 1;
        (0..self.n).map(|i| self.l[i * stride].ln()).sum::<f64>() * 2.0
    }
}
