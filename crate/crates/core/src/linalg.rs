//! Small dense linear algebra: a row-major matrix and a Cholesky solver.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LinearAlgebra(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    /// `AᵀA + shift·I`.
    pub fn gram(&self, shift: f64) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for i in 0..self.rows {
            let r = self.row(i);
            for (a, ra) in r.iter().enumerate() {
                if *ra == 0.0 {
                    continue;
                }
                let grow = &mut g.data[a * n..(a + 1) * n];
                for (gb, rb) in grow.iter_mut().zip(r) {
                    *gb += ra * rb;
                }
            }
        }
        for a in 0..n {
            g.data[a * n + a] += shift;
        }
        g
    }

    /// `AAᵀ + shift·I`.
    pub fn outer_gram(&self, shift: f64) -> Matrix {
        let m = self.rows;
        let mut g = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j)) + if i == j { shift } else { 0.0 };
                g.data[i * m + j] = v;
                g.data[j * m + i] = v;
            }
        }
        g
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::LinearAlgebra(
                "Cholesky needs a square matrix".into(),
            ));
        }
        let n = a.rows;
        let mut l = vec![0.0; n * n];
        let scale = (0..n).fold(0.0f64, |m, i| m.max(a.get(i, i).abs()));
        let floor = scale * f64::EPSILON * n as f64;
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > floor) || !d.is_finite() {
                return Err(Error::LinearAlgebra(format!(
                    "matrix is not positive definite (pivot {j} = {d:.3e})"
                )));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Minimizer of `‖Ax - b‖² + λ‖x‖²` through the normal equations.
pub fn tikhonov(a: &Matrix, b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::LinearAlgebra(format!(
            "right-hand side has {} entries for {} rows",
            b.len(),
            a.rows()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::LinearAlgebra(format!(
            "regularization must be nonnegative, got {lambda}"
        )));
    }
    let chol = Cholesky::factor(&a.gram(lambda))?;
    Ok(chol.solve(&a.tr_mul_vec(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_row_major(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0])
            .unwrap();
        let x = [1.0, -2.0, 0.5];
        let b = a.mul_vec(&x);
        let got = Cholesky::factor(&a).unwrap().solve(&b);
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(Cholesky::factor(&a).is_err());
    }

    #[test]
    fn identity_system_shrinks_by_one_plus_lambda() {
        let mut a = Matrix::zeros(3, 3);
        for i in 0..3 {
            a.set(i, i, 1.0);
        }
        let x = tikhonov(&a, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert!((x[1] - 2.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_without_regularization_fails() {
        let a = Matrix::from_row_major(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(tikhonov(&a, &[1.0, 1.0], 0.0).is_err());
        assert!(tikhonov(&a, &[1.0, 1.0], 1e-3).is_ok());
    }
}
