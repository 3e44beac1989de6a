use crate::error::{Error, Result};

/// Default share of validation nodes rejected by the calibrated threshold.
pub const DEFAULT_QUANTILE: f64 = 0.10;

/// Number of validation nodes the threshold is set to reject:
/// `max(1, floor(quantile · n))`.
pub fn rejected_count(n: usize, quantile: f64) -> usize {
    ((quantile * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// The `k`-th smallest confidence, `k` from [`rejected_count`]. A node is
/// flagged unknown when its confidence is at or below the threshold, so ties
/// with the threshold value are flagged too.
pub fn calibrate_threshold(confidences: &[f64], quantile: f64) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Precondition("no validation confidences to calibrate on".into()));
    }
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::Config(format!("quantile must lie in [0, 1), got {quantile}")));
    }
    if confidences.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("validation confidence".into()));
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rejected_count(sorted.len(), quantile) - 1])
}

pub fn is_flagged(confidence: f64, threshold: f64) -> bool {
    confidence <= threshold
}
