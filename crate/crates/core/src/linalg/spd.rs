//! Cholesky factorization and SPD solves.

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `M = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    /// Factorizes `m`, reading only the lower triangle. Returns `NotSpd` on a
    /// non-positive pivot.
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::dim("cholesky", format!("{:?} not square", m.shape())));
        }
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let lj = l.row(j)[..j].to_vec();
            let diag = m.get(j, j) - lj.iter().map(|v| v * v).sum::<f64>();
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotSpd);
            }
            let djj = diag.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let li = &l.row(i)[..j];
                let dot: f64 = li.iter().zip(&lj).map(|(a, b)| a * b).sum();
                let v = (m.get(i, j) - dot) / djj;
                l.set(i, j, v);
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &DenseMatrix {
        &self.l
    }

    /// Solves `L·Lᵀ·X = B` column by column.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.l.rows();
        if b.rows() != n {
            return Err(Error::dim(
                "cholesky_solve",
                format!("factor {n}x{n}, rhs {:?}", b.shape()),
            ));
        }
        let k = b.cols();
        let mut x = b.clone();
        // forward: L·Z = B
        for i in 0..n {
            let li = self.l.row(i);
            for c in 0..k {
                let mut s = x.get(i, c);
                for (p, &l) in li[..i].iter().enumerate() {
                    s -= l * x.get(p, c);
                }
                x.set(i, c, s / li[i]);
            }
        }
        // backward: Lᵀ·X = Z
        for i in (0..n).rev() {
            let lii = self.l.get(i, i);
            for c in 0..k {
                let mut s = x.get(i, c);
                for p in i + 1..n {
                    s -= self.l.get(p, i) * x.get(p, c);
                }
                x.set(i, c, s / lii);
            }
        }
        Ok(x)
    }
}

/// Factorizes `m`, retrying once with a diagonal jitter of
/// `1e-10·trace(m)/n` when the first attempt fails.
pub fn factor_with_jitter(m: &DenseMatrix) -> Result<Cholesky> {
    match Cholesky::factor(m) {
        Ok(c) => Ok(c),
        Err(Error::NotSpd) => {
            let n = m.rows();
            let jitter = 1e-10 * m.trace() / n.max(1) as f64;
            let mut shifted = m.clone();
            for i in 0..n {
                shifted.set(i, i, shifted.get(i, i) + jitter);
            }
            Cholesky::factor(&shifted)
        }
        Err(e) => Err(e),
    }
}

/// Solves `M·X = B` for symmetric positive definite `M`.
pub fn spd_solve(m: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("spd_solve input".into()));
    }
    factor_with_jitter(m)?.solve(b)
}
