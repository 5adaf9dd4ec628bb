//! Special functions and small sample statistics shared by the other modules.

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc_inv;

/// `ln sqrt(2π)`, the constant term of the Gaussian negative log-likelihood.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Error function (musl's rational approximations via `libm`, within a
/// few ulp on the real line).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal quantile Φ⁻¹(p). Returns ∓∞ at p = 0 and p = 1.
///
/// The inverse-erfc starting point is polished by one Newton step on Φ.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    let density = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    if density > 0.0 {
        x - (std_normal_cdf(x) - p) / density
    } else {
        x
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and population (divide-by-n) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_and_quantile_are_inverse() {
        for &p in &[1e-6, 0.01, 0.1, 0.3, 0.5, 0.77, 0.999] {
            assert!((std_normal_cdf(std_normal_quantile(p)) - p).abs() < 1e-13);
        }
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn erf_reference_values() {
        // 30-digit reference values.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(2.0) - 0.995_322_265_018_952_7).abs() < 1e-15);
        assert_eq!(erf(-1.0), -erf(1.0));
    }

    #[test]
    fn ln_sqrt_2pi_constant() {
        assert!((LN_SQRT_2PI - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
