use crate::error::{Error, Result};

/// Central-difference gradient `(f(x + h e_k) - f(x - h e_k)) / 2h` for every `k`.
///
/// Evaluation happens in f64 regardless of how `f` computes internally.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParam(format!("finite-difference step {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe)?;
        probe[k] = orig - h;
        let fm = f(&probe)?;
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference probe of coordinate {k}"
            )));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error used by the gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Fraction of coordinates whose relative error is below `tol`.
pub fn fraction_within(analytic: &[f64], numeric: &[f64], floor: f64, tol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    if analytic.is_empty() {
        return 1.0;
    }
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(&a, &n)| relative_error(a, n, floor) < tol)
        .count();
    ok as f64 / analytic.len() as f64
}
