use super::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |ad − fd| / max(1, |fd|)` over compared entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped as non-differentiable points.
    pub excluded: Vec<(usize, usize)>,
}

/// Checks the tape gradient of `f` at `x0` against central differences with
/// step `h`.
///
/// An entry is treated as a non-differentiable point (a relu kink, say) and
/// left out of the comparison when its one-sided difference quotients
/// disagree by more than `1e-2·max(1, |central|)`. Smooth functions stay well
/// inside that band for any reasonable `h`.
pub fn grad_check<F>(f: F, x0: &DenseMatrix, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition("grad_check step must be positive".into()));
    }
    let eval = |x: DenseMatrix| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let out = f(&mut tape, leaf)?;
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x0.clone());
    let out = f(&mut tape, leaf)?;
    let f0 = tape.scalar_value(out);
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    let ad = tape.backward(out)?.take(leaf).expect("leaf registered on tape");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    for i in 0..x0.rows() {
        for j in 0..x0.cols() {
            let mut xp = x0.clone();
            xp.set(i, j, x0.get(i, j) + h);
            let mut xm = x0.clone();
            xm.set(i, j, x0.get(i, j) - h);
            let fp = eval(xp)?;
            let fm = eval(xm)?;
            let central = (fp - fm) / (2.0 * h);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > 1e-2 * central.abs().max(1.0) {
                report.excluded.push((i, j));
                continue;
            }
            let err = (ad.get(i, j) - central).abs() / central.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let x0 = DenseMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.77).sin());
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.checked, 9);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x0 = DenseMatrix::from_rows(&[vec![0.0, 1.0, -2.0]]);
        let r = grad_check(
            |t, x| {
                let y = t.relu(x);
                Ok(t.sum(y))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![(0, 0)]);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_positive_step_rejected() {
        let x0 = DenseMatrix::zeros(1, 1);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x0, 0.0).is_err());
    }
}
