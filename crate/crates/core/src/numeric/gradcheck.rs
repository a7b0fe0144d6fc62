//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every coordinate.
pub fn central_difference<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares the analytic gradient returned by `value_and_grad` at `theta`
/// against central differences of its value.
pub fn grad_check<F>(value_and_grad: F, theta: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = value_and_grad(theta);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at θ")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let numeric = central_difference(|p| value_and_grad(p).0, theta, h)?;
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = Some(i);
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
