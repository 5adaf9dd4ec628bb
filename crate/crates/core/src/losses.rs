//! Training objectives: mean squared error, the second-moment loss and the
//! Gaussian negative log-likelihood.
//!
//! The second-moment loss pairs a regression term on the full (unmasked)
//! network with a term that pulls the distance between a dropout
//! sub-network and the full network towards the full network's absolute
//! residual:
//!
//! ```text
//! L = 1/M Σ_i [ a_i² + β (|b_i| − |a_i|)² ],   a_i = f(x_i) − y_i,   b_i = f̃(x_i) − f(x_i)
//! ```
//!
//! Gradients of the second term flow into the sub-network output only; the
//! full-network output is treated as a constant there.

use crate::error::{Result, SmlError};
use crate::stats::LN_SQRT_2PI;

/// Weight of the second-moment term used unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.5;

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(SmlError::arg(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let m = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / m
        })
        .collect();
    Ok((loss / m, grad))
}

/// Per-example terms of the second-moment objective for scalar outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmlTerms {
    /// `(full − target)²`
    pub l_regr: f64,
    /// `(|sub − full| − |full − target|)²`, unweighted by β.
    pub l_sml: f64,
    /// ∂l_regr/∂full. The second-moment term contributes nothing here.
    pub grad_full: f64,
    /// ∂l_sml/∂sub with the full output held fixed.
    pub grad_sub: f64,
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sml_terms(full_pred: f64, sub_pred: f64, target: f64) -> SmlTerms {
    let a = full_pred - target;
    let b = sub_pred - full_pred;
    let gap = b.abs() - a.abs();
    SmlTerms {
        l_regr: a * a,
        l_sml: gap * gap,
        grad_full: 2.0 * a,
        grad_sub: 2.0 * gap * sign0(b),
    }
}

/// Coordinate-wise generalization of [`sml_terms`] for vector outputs; the
/// per-coordinate terms are summed.
pub fn sml_terms_vec(full_pred: &[f64], sub_pred: &[f64], target: &[f64]) -> Result<(SmlTerms, Vec<f64>, Vec<f64>)> {
    if full_pred.len() != sub_pred.len() || full_pred.len() != target.len() || full_pred.is_empty() {
        return Err(SmlError::arg("sml_terms_vec needs equal non-empty lengths"));
    }
    let mut total = SmlTerms {
        l_regr: 0.0,
        l_sml: 0.0,
        grad_full: 0.0,
        grad_sub: 0.0,
    };
    let mut gf = Vec::with_capacity(full_pred.len());
    let mut gs = Vec::with_capacity(full_pred.len());
    for ((&f, &s), &t) in full_pred.iter().zip(sub_pred).zip(target) {
        let k = sml_terms(f, s, t);
        total.l_regr += k.l_regr;
        total.l_sml += k.l_sml;
        gf.push(k.grad_full);
        gs.push(k.grad_sub);
    }
    Ok((total, gf, gs))
}

/// Residuals `a`, spreads `b` and weight β of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SmlBatchTerms {
    a: Vec<f64>,
    b: Vec<f64>,
    beta: f64,
}

impl SmlBatchTerms {
    pub fn new(a: Vec<f64>, b: Vec<f64>, beta: f64) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(SmlError::arg(format!(
                "a and b need equal non-empty lengths, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if !(beta > 0.0) {
            return Err(SmlError::arg(format!("beta must be positive, got {beta}")));
        }
        Ok(SmlBatchTerms { a, b, beta })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `1/M Σ [a_i² + β(|b_i| − |a_i|)²]`.
pub fn sml_batch_loss(terms: &SmlBatchTerms) -> f64 {
    let sum: f64 = terms
        .a
        .iter()
        .zip(&terms.b)
        .map(|(a, b)| {
            let gap = b.abs() - a.abs();
            a * a + terms.beta * gap * gap
        })
        .sum();
    sum / terms.len() as f64
}

/// Mean per-point Gaussian NLL `log σ + (μ − y)²/(2σ²) [+ ln √(2π)]`.
pub fn gaussian_nll(mu: &[f64], sigma: &[f64], y: &[f64], include_const: bool) -> Result<f64> {
    if mu.is_empty() || mu.len() != sigma.len() || mu.len() != y.len() {
        return Err(SmlError::arg(format!(
            "gaussian_nll needs equal non-empty lengths, got {}, {}, {}",
            mu.len(),
            sigma.len(),
            y.len()
        )));
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(SmlError::arg(format!("sigma[{i}] = {} is not positive", sigma[i])));
    }
    let sum: f64 = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .map(|((&m, &s), &t)| {
            let r = m - t;
            s.ln() + r * r / (2.0 * s * s)
        })
        .sum();
    let nll = sum / mu.len() as f64;
    Ok(if include_const { nll + LN_SQRT_2PI } else { nll })
}

/// Per-point NLL (without constant) and its partials w.r.t. μ and σ.
#[inline]
pub fn gaussian_nll_point(mu: f64, sigma: f64, y: f64) -> (f64, f64, f64) {
    let r = mu - y;
    let s2 = sigma * sigma;
    let loss = sigma.ln() + r * r / (2.0 * s2);
    (loss, r / s2, 1.0 / sigma - r * r / (s2 * sigma))
}
