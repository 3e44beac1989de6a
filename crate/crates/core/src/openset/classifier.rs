//! Full-batch softmax regression on propagated features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::condense::CondensedGraph;
use crate::error::{Error, Result};
use crate::linalg::{log_softmax_rows, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the gradient norm drops to this value.
    pub tol: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_steps: 2000,
            tol: 1e-6,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `d × C`.
    pub weights: DenseMatrix,
    /// `1 × C`.
    pub bias: DenseMatrix,
    pub steps: usize,
    pub final_grad_norm: f64,
}

impl LinearClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = x.matmul(&self.weights)?;
        let c = z.cols();
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.bias.data()[..c]) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn probabilities(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(log_softmax_rows(&self.logits(x)?).map(f64::exp))
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// Softmax regression with Adam, run until the gradient norm reaches
/// `cfg.tol` or `cfg.max_steps` steps have been taken.
pub fn train_linear(
    x: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<LinearClassifier> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::dim(
            "train_linear",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidData(format!("label {bad} outside {num_classes} classes")));
    }
    let mut seen = vec![false; num_classes];
    for &y in labels {
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Precondition(
            "downstream training needs at least two classes".into(),
        ));
    }
    let d = x.cols();
    let y = DenseMatrix::one_hot(labels, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("positive std");
    let mut clf = LinearClassifier {
        weights: DenseMatrix::from_fn(d, num_classes, |_, _| init.sample(&mut rng)),
        bias: DenseMatrix::zeros(1, num_classes),
        steps: 0,
        final_grad_norm: f64::INFINITY,
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; d * num_classes + num_classes];
    let mut v = m.clone();
    for step in 1..=cfg.max_steps {
        let probs = clf.probabilities(x)?;
        let g = probs.sub(&y)?.scale(1.0 / n as f64);
        let mut gw = x.t_matmul(&g)?;
        gw.axpy(cfg.l2, &clf.weights);
        let mut gb = vec![0.0; num_classes];
        for i in 0..n {
            for (acc, val) in gb.iter_mut().zip(g.row(i)) {
                *acc += val;
            }
        }
        let grad: Vec<f64> = gw.data().iter().chain(&gb).copied().collect();
        let norm = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("downstream gradient at step {step}")));
        }
        clf.final_grad_norm = norm;
        if norm <= cfg.tol {
            break;
        }
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let wlen = d * num_classes;
        for (k, gk) in grad.iter().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let delta = cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            if k < wlen {
                clf.weights.data_mut()[k] -= delta;
            } else {
                clf.bias.data_mut()[k - wlen] -= delta;
            }
        }
        clf.steps = step;
    }
    Ok(clf)
}

/// Trains on the condensed features directly: with an identity adjacency the
/// propagated condensed features are the features themselves.
pub fn train_downstream(cond: &CondensedGraph, cfg: &TrainConfig) -> Result<LinearClassifier> {
    if cond.num_nodes() == 0 {
        return Err(Error::Precondition("condensed graph is empty".into()));
    }
    train_linear(&cond.features, &cond.labels, cond.num_classes(), cfg)
}
