//! Relay model: a random relu transformation followed by a closed-form
//! kernel ridge regression readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax_rows, spd_solve, DenseMatrix, Tape, Var};

/// Random transformation layer weights, `d × b`.
///
/// Entries are i.i.d. `N(0, 2/d)` drawn row-major from `ChaCha8Rng` seeded
/// with `seed`, so the matrix is reproducible from `(seed, d, b)` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayParams {
    pub weight: DenseMatrix,
    pub seed: u64,
}

impl RelayParams {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }
}

/// Fitted readout `W^S` with its ridge constant and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct KrrReadout {
    pub weights: DenseMatrix,
    pub lambda: f64,
    pub log_tau: f64,
}

impl KrrReadout {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

pub fn sample_relay(seed: u64, d: usize, b: usize) -> Result<RelayParams> {
    if b == 0 || d == 0 {
        return Err(Error::Precondition("relay dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive std");
    let data = (0..d * b).map(|_| normal.sample(&mut rng)).collect();
    Ok(RelayParams {
        weight: DenseMatrix::from_vec(d, b, data)?,
        seed,
    })
}

/// `relu(H · weight)`.
pub fn transform(theta: &RelayParams, h: &DenseMatrix) -> Result<DenseMatrix> {
    if h.cols() != theta.input_dim() {
        return Err(Error::dim(
            "transform",
            format!(
                "embeddings have {} columns, relay expects {}",
                h.cols(),
                theta.input_dim()
            ),
        ));
    }
    let mut p = h.matmul(&theta.weight)?;
    for v in p.data_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    Ok(p)
}

/// Records `relu(H · weight)` with `H` on the tape.
pub fn transform_tape(tape: &mut Tape, theta: &RelayParams, h: Var) -> Result<Var> {
    let w = tape.constant(theta.weight.clone());
    let z = tape.matmul(h, w)?;
    Ok(tape.relu(z))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!(
            "ridge constant must be positive, got {lambda}"
        )));
    }
    Ok(())
}

/// Dual-form ridge solution `Pᵀ(PPᵀ + λI)⁻¹Y′`.
pub fn krr_fit(p: &DenseMatrix, yp: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    check_lambda(lambda)?;
    if p.rows() != yp.rows() {
        return Err(Error::dim(
            "krr_fit",
            format!("{:?} vs targets {:?}", p.shape(), yp.shape()),
        ));
    }
    let mut gram = p.matmul_t(p)?;
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + lambda);
    }
    let alpha = spd_solve(&gram, yp)?;
    p.t_matmul(&alpha)
}

/// Tape version of [`krr_fit`], differentiable with respect to `p`.
pub fn krr_fit_tape(tape: &mut Tape, p: Var, yp: &DenseMatrix, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let n = tape.value(p).rows();
    if n != yp.rows() {
        return Err(Error::dim(
            "krr_fit",
            format!("{:?} vs targets {:?}", tape.value(p).shape(), yp.shape()),
        ));
    }
    let pt = tape.transpose(p);
    let gram = tape.matmul(p, pt)?;
    let ridge = tape.constant(DenseMatrix::identity(n).scale(lambda));
    let system = tape.add(gram, ridge)?;
    let y = tape.constant(yp.clone());
    let alpha = tape.spd_solve(system, y)?;
    tape.matmul(pt, alpha)
}

/// Row log-probabilities of `relu(H·weight)·W / τ`.
pub fn predict_logprobs(theta: &RelayParams, w: &DenseMatrix, h: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {tau}")));
    }
    let logits = transform(theta, h)?.matmul(w)?;
    logprobs_from_logits(&logits, tau)
}

pub fn logprobs_from_logits(logits: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(log_softmax_rows(&logits.scale(1.0 / tau)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_relay(11, 5, 7).unwrap(), sample_relay(11, 5, 7).unwrap());
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let a = sample_relay(1, 20, 50).unwrap();
        let b = sample_relay(2, 20, 50).unwrap();
        let same = a
            .weight
            .data()
            .iter()
            .zip(b.weight.data())
            .filter(|(x, y)| x == y)
            .count();
        assert!(same * 100 <= a.weight.data().len());
    }

    #[test]
    fn transform_through_identity() {
        let theta = RelayParams {
            weight: DenseMatrix::identity(2),
            seed: 0,
        };
        let p = transform(&theta, &DenseMatrix::from_rows(&[vec![-1.0, 2.0]])).unwrap();
        assert_eq!(p, DenseMatrix::from_rows(&[vec![0.0, 2.0]]));
        assert_eq!(
            transform(&theta, &DenseMatrix::zeros(3, 2)).unwrap(),
            DenseMatrix::zeros(3, 2)
        );
        assert!(transform(&theta, &DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn krr_on_identity() {
        let w = krr_fit(&DenseMatrix::identity(2), &DenseMatrix::identity(2), 5e-3).unwrap();
        let want = DenseMatrix::identity(2).scale(1.0 / 1.005);
        assert!(w.max_abs_diff(&want) < 1e-15);
        assert!((w.get(0, 0) - 0.995025).abs() < 1e-6);
    }

    #[test]
    fn krr_rejects_non_positive_lambda() {
        assert!(krr_fit(&DenseMatrix::identity(2), &DenseMatrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn logprob_fixtures() {
        let lp = logprobs_from_logits(&DenseMatrix::from_rows(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert!((lp.get(0, 0) + std::f64::consts::LN_2).abs() < 1e-12);
        let lp = logprobs_from_logits(&DenseMatrix::from_rows(&[vec![1.0, -1.0]]), 1.0).unwrap();
        assert!((lp.get(0, 0) + 0.126928).abs() < 1e-6);
        assert!((lp.get(0, 1) + 2.126928).abs() < 1e-6);
        let lp = logprobs_from_logits(&DenseMatrix::from_rows(&[vec![0.9, -0.7, 0.1]]), 1e6).unwrap();
        for j in 0..3 {
            assert!((lp.get(0, j) + 3f64.ln()).abs() < 1e-6);
        }
    }
}
