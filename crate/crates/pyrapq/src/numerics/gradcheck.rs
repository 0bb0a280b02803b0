//! Central finite-difference gradient verification.

use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Returns the max over coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Param(format!("finite-difference step {h}")));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work)?;
        work[i] = orig - h;
        let down = f(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(+h)={up}, f(-h)={down}"
            )));
        }
        let central = (up - down) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_verifies() {
        let err = finite_diff_check(
            &mut |x| Ok(x[0] * x[0]),
            &[3.0],
            &[6.0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "err {err}");
    }

    #[test]
    fn doubled_gradient_scores_one_third() {
        let err = finite_diff_check(&mut |x| Ok(x[0] * x[0]), &[3.0], &[12.0], 1e-5).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6, "err {err}");
    }

    #[test]
    fn constant_function_passes_with_zero_gradient() {
        let err = finite_diff_check(&mut |_| Ok(7.5), &[1.0, -2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(err <= 1e-9, "err {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let res = finite_diff_check(&mut |x| Ok((x[0] - 1.0).ln()), &[0.5], &[0.0], 1e-5);
        assert!(res.is_err());
    }
}
