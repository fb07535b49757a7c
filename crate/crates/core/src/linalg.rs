//! Dense symmetric positive-definite helpers for the GP surrogate: a thin
//! layer over `nalgebra` adding jitter escalation and slice-based solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(DMatrix::from_fn(n, n, f))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n() {
            self.0[(i, i)] += v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Plain factorization; fails if the matrix is not numerically positive
    /// definite.
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix to factor"));
        }
        let c = nalgebra::Cholesky::new(a.0.clone()).ok_or_else(|| {
            Error::IllConditioned(format!("{0}x{0} matrix is not positive definite", a.n()))
        })?;
        Ok(Self { l: Matrix(c.unpack()) })
    }

    /// Factorization with diagonal jitter escalation: tries `a` as given, then
    /// adds `start, 10·start, ...` up to `max_jitter`. Returns the factor and
    /// the jitter that was needed.
    pub fn factor_with_jitter(a: &Matrix, start: f64, max_jitter: f64) -> Result<(Self, f64)> {
        if let Ok(c) = Self::factor(a) {
            return Ok((c, 0.0));
        }
        let mut jitter = start;
        while jitter <= max_jitter * (1.0 + 1e-12) {
            let mut b = a.clone();
            b.add_diagonal(jitter);
            if let Ok(c) = Self::factor(&b) {
                log::warn!("cholesky needed diagonal jitter {jitter:e}");
                return Ok((c, jitter));
            }
            jitter *= 10.0;
        }
        Err(Error::IllConditioned(format!(
            "factorization failed with jitter up to {max_jitter:e}"
        )))
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut y = DVector::from_column_slice(b);
        self.l.0.solve_lower_triangular_mut(&mut y);
        y.as_slice().to_vec()
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_column_slice(y);
        self.l.0.tr_solve_lower_triangular_mut(&mut x);
        x.as_slice().to_vec()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `ln det A = 2 Σ ln L_ii`.
    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.0.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `A⁻¹` from solves against the identity. Only needed for the trace
    /// terms of the marginal-likelihood gradient.
    pub fn inverse(&self) -> Matrix {
        let mut inv = DMatrix::identity(self.l.n(), self.l.n());
        self.l.0.solve_lower_triangular_mut(&mut inv);
        self.l.0.tr_solve_lower_triangular_mut(&mut inv);
        Matrix(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix {
        // B Bᵀ + n I for a fixed B
        let b = Matrix::from_fn(n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let mut a = Matrix::from_fn(n, |i, j| (0..n).map(|k| b.get(i, k) * b.get(j, k)).sum());
        a.add_diagonal(n as f64);
        a
    }

    #[test]
    fn factor_reconstructs() {
        let a = spd(6);
        let c = Cholesky::factor(&a).unwrap();
        let l = c.lower();
        for i in 0..6 {
            for j in 0..6 {
                let v: f64 = (0..6).map(|k| l.get(i, k) * l.get(j, k)).sum();
                assert!((v - a.get(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn solve_and_inverse() {
        let a = spd(5);
        let c = Cholesky::factor(&a).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let x = c.solve(&b);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
        let inv = c.inverse();
        for i in 0..5 {
            for j in 0..5 {
                let v: f64 = (0..5).map(|k| a.get(i, k) * inv.get(k, j)).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_needs_jitter() {
        let a = Matrix::from_fn(3, |_, _| 1.0);
        assert!(Cholesky::factor(&a).is_err());
        let (_, jitter) = Cholesky::factor_with_jitter(&a, 1e-10, 1e-6).unwrap();
        assert!(jitter > 0.0);
        let zero = Matrix::from_fn(2, |_, _| 0.0);
        let bad = Matrix::from_fn(2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(Cholesky::factor_with_jitter(&bad, 1e-10, 1e-6).is_err());
        assert!(Cholesky::factor_with_jitter(&zero, 1e-10, 1e-6).is_ok());
    }
}
