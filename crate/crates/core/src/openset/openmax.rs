//! Open-set decision rules: thresholded softmax and Openmax.

use std::fmt;
use std::str::FromStr;

use super::classifier::LinearClassifier;
use super::threshold::{calibrate_threshold, is_flagged};
use super::weibull::{fit_weibull, WeibullModel};
use crate::error::{Error, Result};
use crate::linalg::{argmax, log_softmax_rows, DenseMatrix};

pub const DEFAULT_TAIL_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OpensetMode {
    #[default]
    Softmax,
    Openmax,
}

impl FromStr for OpensetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "openmax" => Ok(Self::Openmax),
            other => Err(Error::Config(format!(
                "unknown open-set mode `{other}` (expected softmax or openmax)"
            ))),
        }
    }
}

impl fmt::Display for OpensetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Openmax => "openmax",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Known(usize),
    Unknown,
}

/// Per-class mean activation vectors and tail models.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenmaxParams {
    /// `C × C`: row `c` is the mean logit vector of class `c`.
    pub mavs: DenseMatrix,
    /// `None` where too few correctly classified examples were available.
    pub weibulls: Vec<Option<WeibullModel>>,
    pub alpha_rank: usize,
}

impl OpenmaxParams {
    /// Tail CDF of every class at the distance from `v` to its MAV.
    pub fn cdfs(&self, v: &[f64]) -> Vec<f64> {
        self.weibulls
            .iter()
            .enumerate()
            .map(|(c, w)| match w {
                Some(w) => w.cdf(euclidean(v, self.mavs.row(c))),
                None => 0.0,
            })
            .collect()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Revised logits and the unknown logit. The class at rank `r` (1-based,
/// ties broken toward the lower index) among the top `alpha_rank` gets
/// `w = (1 − (r − 1)/alpha_rank) · cdf`; its logit becomes `v(1 − w)` and
/// `v·w` is added to the unknown logit.
pub fn revise_logits(v: &[f64], cdf: &[f64], alpha_rank: usize) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut revised = v.to_vec();
    let mut unknown = 0.0;
    for (r, &i) in order.iter().take(alpha_rank.min(v.len())).enumerate() {
        let w = (1.0 - r as f64 / alpha_rank as f64) * cdf[i];
        revised[i] = v[i] * (1.0 - w);
        unknown += v[i] * w;
    }
    (revised, unknown)
}

/// Probabilities over the known classes followed by the unknown channel.
/// The unknown channel is present only when some class weight is positive;
/// otherwise the result is the plain softmax over known classes.
pub fn openmax_probabilities(v: &[f64], cdf: &[f64], alpha_rank: usize) -> Vec<f64> {
    if cdf.iter().all(|&c| c == 0.0) || alpha_rank == 0 {
        return softmax(v);
    }
    let (mut revised, unknown) = revise_logits(v, cdf, alpha_rank);
    revised.push(unknown);
    softmax(&revised)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
    log_softmax_rows(&m).data().iter().map(|l| l.exp()).collect()
}

/// Fits MAVs and Weibull tails from the logits of correctly classified
/// training rows. Classes with fewer than two such rows, or with a
/// degenerate tail, get no tail model.
pub fn fit_openmax(
    logits: &DenseMatrix,
    labels: &[usize],
    tail_size: usize,
    alpha_rank: usize,
) -> Result<OpenmaxParams> {
    let c = logits.cols();
    if labels.len() != logits.rows() {
        return Err(Error::dim(
            "fit_openmax",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    if alpha_rank == 0 {
        return Err(Error::Config("alpha_rank must be positive".into()));
    }
    let pred = logits.argmax_rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, (&p, &y)) in pred.iter().zip(labels).enumerate() {
        if p == y && y < c {
            members[y].push(i);
        }
    }
    let mut mavs = DenseMatrix::zeros(c, c);
    let mut weibulls = Vec::with_capacity(c);
    for (cls, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            weibulls.push(None);
            continue;
        }
        let mav = mavs.row_mut(cls);
        for &i in rows {
            for (m, v) in mav.iter_mut().zip(logits.row(i)) {
                *m += v;
            }
        }
        for m in mav.iter_mut() {
            *m /= rows.len() as f64;
        }
        let dists: Vec<f64> = rows.iter().map(|&i| euclidean(logits.row(i), mavs.row(cls))).collect();
        let tail = tail_size.min(dists.len());
        weibulls.push(if tail >= 2 {
            fit_weibull(&dists, tail).ok()
        } else {
            None
        });
    }
    Ok(OpenmaxParams {
        mavs,
        weibulls,
        alpha_rank,
    })
}

/// A calibrated open-set decision rule.
#[derive(Debug, Clone, PartialEq)]
pub struct OpensetModel {
    pub mode: OpensetMode,
    pub threshold: f64,
    pub openmax: Option<OpenmaxParams>,
}

/// Raw score of one node before thresholding.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    channel: usize,
    confidence: f64,
    unknown_won: bool,
}

fn score_rows(mode: OpensetMode, openmax: Option<&OpenmaxParams>, logits: &DenseMatrix) -> Result<Vec<Scored>> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let v = logits.row(i);
        let probs = match mode {
            OpensetMode::Softmax => softmax(v),
            OpensetMode::Openmax => {
                let params = openmax.ok_or_else(|| Error::Precondition("openmax model is not calibrated".into()))?;
                openmax_probabilities(v, &params.cdfs(v), params.alpha_rank)
            }
        };
        let channel = argmax(&probs);
        out.push(Scored {
            channel,
            confidence: probs[channel],
            unknown_won: channel == c,
        });
    }
    Ok(out)
}

impl OpensetModel {
    /// Sets the threshold so that the calibration quantile of `val_logits`
    /// is rejected under `mode`.
    pub fn calibrate(
        mode: OpensetMode,
        openmax: Option<OpenmaxParams>,
        val_logits: &DenseMatrix,
        quantile: f64,
    ) -> Result<Self> {
        let scored = score_rows(mode, openmax.as_ref(), val_logits)?;
        let conf: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
        let threshold = calibrate_threshold(&conf, quantile)?;
        Ok(Self {
            mode,
            threshold,
            openmax,
        })
    }

    pub fn decide(&self, logits: &DenseMatrix) -> Result<Vec<Prediction>> {
        Ok(score_rows(self.mode, self.openmax.as_ref(), logits)?
            .into_iter()
            .map(|s| {
                if s.unknown_won || is_flagged(s.confidence, self.threshold) {
                    Prediction::Unknown
                } else {
                    Prediction::Known(s.channel)
                }
            })
            .collect())
    }

    pub fn predict(&self, clf: &LinearClassifier, h: &DenseMatrix) -> Result<Vec<Prediction>> {
        self.decide(&clf.logits(h)?)
    }
}
