//! Two-parameter Weibull fitting for extreme-value tails.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullModel {
    pub shape: f64,
    pub scale: f64,
    pub tail_size: usize,
}

impl WeibullModel {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            1.0 - (-(x / self.scale).powf(self.shape)).exp()
        }
    }

    /// Log-likelihood of `xs` (all positive).
    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        log_likelihood(xs, self.shape, self.scale)
    }
}

pub fn log_likelihood(xs: &[f64], shape: f64, scale: f64) -> f64 {
    let (k, l) = (shape, scale);
    xs.iter()
        .map(|&x| k.ln() - l.ln() + (k - 1.0) * (x / l).ln() - (x / l).powf(k))
        .sum()
}

/// Maximum-likelihood scale for a fixed shape: `(mean xᵏ)^{1/k}`.
pub fn scale_for_shape(xs: &[f64], shape: f64) -> f64 {
    let m = xs.iter().map(|x| x.powf(shape)).sum::<f64>() / xs.len() as f64;
    m.powf(1.0 / shape)
}

/// Fits the shape alone with the scale held at its profile optimum.
pub fn fit_fixed_shape(xs: &[f64], shape: f64) -> Result<WeibullModel> {
    check_sample(xs)?;
    if !(shape > 0.0) {
        return Err(Error::Precondition(format!("shape must be positive, got {shape}")));
    }
    Ok(WeibullModel {
        shape,
        scale: scale_for_shape(xs, shape),
        tail_size: xs.len(),
    })
}

fn check_sample(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Precondition("empty sample".into()));
    }
    if let Some(bad) = xs.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Precondition(format!(
            "distances must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

/// Profile score `Σxᵏ ln x / Σxᵏ − 1/k − mean(ln x)` and its derivative.
/// Its root in `k` is the shape estimate. `xs` should be scaled to `max = 1`.
fn profile(xs: &[f64], logs: &[f64], mean_log: f64, k: f64) -> (f64, f64) {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (&x, &l) in xs.iter().zip(logs) {
        let p = x.powf(k);
        s0 += p;
        s1 += p * l;
        s2 += p * l * l;
    }
    let f = s1 / s0 - 1.0 / k - mean_log;
    let df = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
    (f, df)
}

fn profile_loglik(xs: &[f64], sum_log: f64, k: f64) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().map(|x| x.powf(k)).sum::<f64>() / n;
    n * k.ln() - n * m.ln() + (k - 1.0) * sum_log - n
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-12 * (1.0 + a.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Maximum-likelihood fit on the `tail_size` largest values of `distances`.
///
/// The shape solves the profile score equation by Newton's method kept
/// inside a sign-change bracket (bisecting whenever a step would leave it).
/// If the score does not reach `1e-10` the shape is taken from a
/// golden-section search of the profile likelihood over the bracket.
pub fn fit_weibull(distances: &[f64], tail_size: usize) -> Result<WeibullModel> {
    if tail_size < 2 {
        return Err(Error::Precondition("tail_size must be at least 2".into()));
    }
    if distances.len() < tail_size {
        return Err(Error::Precondition(format!(
            "{} distances for a tail of {tail_size}",
            distances.len()
        )));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(tail_size);
    check_sample(&sorted)?;
    let top = sorted[0];
    let bottom = sorted[tail_size - 1];
    if top - bottom <= 1e-12 * top {
        return Err(Error::InvalidData("degenerate tail: all distances equal".into()));
    }
    let xs: Vec<f64> = sorted.iter().map(|x| x / top).collect();
    let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let sum_log: f64 = logs.iter().sum();
    let mean_log = sum_log / xs.len() as f64;

    let mut lo = 1e-3;
    let mut hi = 1.0;
    while profile(&xs, &logs, mean_log, hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NonFinite("weibull shape diverged".into()));
        }
    }
    let mut k = (lo + hi) / 2.0;
    let mut converged = false;
    for _ in 0..200 {
        let (f, df) = profile(&xs, &logs, mean_log, k);
        if f.abs() <= 1e-10 {
            converged = true;
            break;
        }
        if f < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let step = k - f / df;
        k = if df > 0.0 && step > lo && step < hi {
            step
        } else {
            (lo + hi) / 2.0
        };
    }
    if !converged {
        k = golden_max(|s| profile_loglik(&xs, sum_log, s), lo, hi);
    }
    Ok(WeibullModel {
        shape: k,
        scale: scale_for_shape(&xs, k) * top,
        tail_size,
    })
}
