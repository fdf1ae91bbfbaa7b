//! Fixed-size square matrices for the 1D/2D setting.
//!
//! Everything in this crate lives in dimension one or two, so a padded 2×2
//! array covers every Jacobian, covariance and smoothing matrix we need.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareMat {
    pub dim: usize,
    pub a: [[f64; 2]; 2],
}

impl SquareMat {
    pub fn zeros(dim: usize) -> Self {
        debug_assert!(dim == 1 || dim == 2);
        Self {
            dim,
            a: [[0.0; 2]; 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.a[i][i] = s;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.a[i][j] = rows[i][j];
            }
        }
        m
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.a[i][j]).collect())
            .collect()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.a[0][0],
            _ => self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0],
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i][i]).sum()
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let mut m = Self::zeros(self.dim);
        match self.dim {
            1 => m.a[0][0] = 1.0 / d,
            _ => {
                m.a[0][0] = self.a[1][1] / d;
                m.a[1][1] = self.a[0][0] / d;
                m.a[0][1] = -self.a[0][1] / d;
                m.a[1][0] = -self.a[1][0] / d;
            }
        }
        Some(m)
    }

    pub fn transpose(&self) -> Self {
        let mut m = *self;
        m.a[0][1] = self.a[1][0];
        m.a[1][0] = self.a[0][1];
        m
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] = (0..self.dim).map(|k| self.a[i][k] * other.a[k][j]).sum();
            }
        }
        m
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|k| self.a[i][k] * v[k]).sum())
            .collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] += other.a[i][j];
            }
        }
        m
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] *= s;
            }
        }
        m
    }

    /// Largest singular value, closed form.
    pub fn op_norm(&self) -> f64 {
        match self.dim {
            1 => self.a[0][0].abs(),
            _ => {
                let (a, b, c, d) = (self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1]);
                let p = (a + d).hypot(c - b);
                let q = (a - d).hypot(b + c);
                0.5 * (p + q)
            }
        }
    }

    /// Smallest singular value, closed form.
    pub fn min_singular(&self) -> f64 {
        match self.dim {
            1 => self.a[0][0].abs(),
            _ => {
                let (a, b, c, d) = (self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1]);
                let p = (a + d).hypot(c - b);
                let q = (a - d).hypot(b + c);
                0.5 * (p - q).abs()
            }
        }
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        match self.dim {
            1 => vec![self.a[0][0]],
            _ => {
                let (a, b, d) = (self.a[0][0], 0.5 * (self.a[0][1] + self.a[1][0]), self.a[1][1]);
                let mean = 0.5 * (a + d);
                let r = (0.5 * (a - d)).hypot(b);
                vec![mean - r, mean + r]
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m = m.max((self.a[i][j] - other.a[i][j]).abs());
            }
        }
        m
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_values_match_eigen_route() {
        let m = SquareMat::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]);
        let mtm = m.transpose().matmul(&m);
        let ev = mtm.sym_eigenvalues();
        assert!((m.op_norm() - ev[1].sqrt()).abs() < 1e-12);
        assert!((m.min_singular() - ev[0].sqrt()).abs() < 1e-12);
        assert!((m.op_norm() * m.min_singular() - m.det().abs()).abs() < 1e-12);
    }

    #[test]
    fn inverse_roundtrip() {
        let m = SquareMat::from_rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]);
        let p = m.matmul(&m.inverse().unwrap());
        assert!(p.max_abs_diff(&SquareMat::identity(2)) < 1e-14);
        assert!(SquareMat::zeros(2).inverse().is_none());
    }

    #[test]
    fn lse_stable() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
