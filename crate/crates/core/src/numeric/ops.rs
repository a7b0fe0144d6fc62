//! Elementary differentiable operations on vectors.

use super::tensor::{axpy, dot, norm, Tensor};
use crate::error::{Error, Result};

/// Added to the product of norms so zero vectors have similarity 0.
pub const COSINE_EPS: f64 = 1e-12;

/// `a·b / (‖a‖‖b‖ + ε)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dimension("cosine of empty vectors".into()));
    }
    Ok(cosine_unchecked(a, b))
}

#[inline]
pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + COSINE_EPS)
}

/// Accumulates `upstream · ∂cos(a, b)/∂a` into `grad_a` and the same for `b`.
///
/// The norm derivative is taken as zero at the origin.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    if upstream == 0.0 {
        return;
    }
    let na = norm(a);
    let nb = norm(b);
    let den = na * nb + COSINE_EPS;
    let num = dot(a, b);
    let q = upstream * num / (den * den);
    axpy(upstream / den, b, grad_a);
    if na > 0.0 {
        axpy(-q * nb / na, a, grad_a);
    }
    axpy(upstream / den, a, grad_b);
    if nb > 0.0 {
        axpy(-q * na / nb, b, grad_b);
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Gradient through softmax: `p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// `log Σ exp(v)`, stabilized.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `W x + b`.
pub fn linear(x: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.cols() != x.len() || weight.rows() != bias.len() {
        return Err(Error::Dimension(format!(
            "linear map {}x{} with input {} and bias {}",
            weight.rows(),
            weight.cols(),
            x.len(),
            bias.len()
        )));
    }
    let mut out = weight.matvec(x);
    axpy(1.0, bias, &mut out);
    Ok(out)
}
