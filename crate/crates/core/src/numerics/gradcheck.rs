use crate::error::{Error, Result};

/// Central finite-difference check of an analytic gradient.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
/// `function` is evaluated at `point ± epsilon·e_i` for every coordinate.
pub fn grad_check(
    mut function: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if analytic.len() != point.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: vec![analytic.len()],
            rhs: vec![point.len()],
        });
    }
    if let Some(bad) = point.iter().position(|x| !x.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite coordinate {bad} in check point")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = function(&x)?;
        x[i] = orig - epsilon;
        let minus = function(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
