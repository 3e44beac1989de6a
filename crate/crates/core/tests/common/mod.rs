#![allow(dead_code)]

use opengc::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Gauss-Jordan solve with partial pivoting, written independently of the
/// library's Cholesky path.
pub fn gauss_solve(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    let pivot_row = aug[col].clone();
                    for (v, pv) in aug[r].iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    DenseMatrix::from_fn(n, m, |i, j| aug[i][n + j])
}

pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn rel_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-300)
}
