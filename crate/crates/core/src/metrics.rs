//! Measures relating predicted uncertainties to residuals.
//!
//! Calibration metrics act on normalized residuals `r_i = (μ_i − y_i)/σ_i`,
//! which are standard normal for perfectly calibrated Gaussian predictions:
//!
//! - ECE: `Σ_j |p̃_j − 1/B|` over `B` equal-probability bins of N(0, 1).
//! - WS: 1-Wasserstein distance to N(0, 1) by quantile matching,
//!   `1/N Σ_i |r_(i) − Φ⁻¹((i − ½)/N)|`.
//! - KS: `sup_x |F_N(x) − Φ(x)|`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmlError};
use crate::losses::gaussian_nll;
use crate::stats::{std_normal_cdf, std_normal_quantile};

/// Lower clamp applied to σ before normalizing residuals.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-8;
/// Number of ECE bins.
pub const DEFAULT_ECE_BINS: usize = 10;

pub fn rmse(mu: &[f64], y: &[f64]) -> Result<f64> {
    if mu.is_empty() || mu.len() != y.len() {
        return Err(SmlError::arg(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            mu.len(),
            y.len()
        )));
    }
    let ss: f64 = mu.iter().zip(y).map(|(m, t)| (m - t) * (m - t)).sum();
    Ok((ss / mu.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedResiduals {
    r: Vec<f64>,
    pub sigma_clamp_count: usize,
}

impl NormalizedResiduals {
    /// Wraps already-normalized residuals.
    pub fn from_values(r: Vec<f64>) -> Result<Self> {
        if r.is_empty() {
            return Err(SmlError::arg("normalized residuals must not be empty"));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(SmlError::arg("normalized residuals must be finite"));
        }
        Ok(NormalizedResiduals {
            r,
            sigma_clamp_count: 0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.r.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// `r_i = (μ_i − y_i) / max(σ_i, sigma_min)`.
pub fn normalize_residuals(mu: &[f64], sigma: &[f64], y: &[f64], sigma_min: f64) -> Result<NormalizedResiduals> {
    if mu.len() != sigma.len() || mu.len() != y.len() {
        return Err(SmlError::arg("mu, sigma and y must have equal lengths"));
    }
    if !(sigma_min > 0.0) {
        return Err(SmlError::arg(format!("sigma_min must be positive, got {sigma_min}")));
    }
    let mut clamped = 0;
    let r = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .map(|((&m, &s), &t)| {
            let s = if s < sigma_min || s.is_nan() {
                clamped += 1;
                sigma_min
            } else {
                s
            };
            (m - t) / s
        })
        .collect();
    let mut out = NormalizedResiduals::from_values(r)?;
    out.sigma_clamp_count = clamped;
    Ok(out)
}

/// Expected calibration error over `bins` equal-probability standard-normal bins.
///
/// Bin `j` holds residuals with `j/B ≤ Φ(r) < (j+1)/B`, i.e. the bin edges
/// are the normal quantiles `Φ⁻¹(j/B)` with infinite outer edges.
pub fn ece(r: &NormalizedResiduals, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(SmlError::arg(format!("ece needs at least 2 bins, got {bins}")));
    }
    if r.is_empty() {
        return Err(SmlError::arg("ece of an empty sample"));
    }
    let mut counts = vec![0usize; bins];
    for &v in r.values() {
        let j = ((std_normal_cdf(v) * bins as f64).floor() as usize).min(bins - 1);
        counts[j] += 1;
    }
    // Σ_j |c_j/N − 1/B| = Σ_j |B·c_j − N| / (N·B): exact integer numerator, one rounding.
    let n = r.len() as u128;
    let numer: u128 = counts.iter().map(|&c| (bins as u128 * c as u128).abs_diff(n)).sum();
    Ok(numer as f64 / (n * bins as u128) as f64)
}

/// 1-Wasserstein distance between the sample and N(0, 1).
pub fn wasserstein_to_std_normal(r: &NormalizedResiduals) -> f64 {
    let sorted = r.sorted();
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - std_normal_quantile((i as f64 + 0.5) / n)).abs())
        .sum::<f64>()
        / n
}

/// Kolmogorov-Smirnov distance between the sample and N(0, 1).
pub fn ks_to_std_normal(r: &NormalizedResiduals) -> f64 {
    let sorted = r.sorted();
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = std_normal_cdf(v);
            let i = i as f64;
            ((i + 1.0) / n - cdf).max(cdf - i / n)
        })
        .fold(0.0, f64::max)
}

/// Mean NLL without the `ln √(2π)` constant.
pub fn nll_report(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<f64> {
    gaussian_nll(mu, sigma, y, false)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(SmlError::arg("pearson needs two equal-length samples of size >= 2"));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 {
        return Err(SmlError::UndefinedCorrelation("first sample".into()));
    }
    if svv == 0.0 {
        return Err(SmlError::UndefinedCorrelation("second sample".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub split: String,
    pub fold: usize,
    pub rmse: f64,
    pub nll: f64,
    pub ece: f64,
    pub ws: f64,
    pub ks: f64,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 9] =
        ["method", "dataset", "split", "fold", "rmse", "nll", "ece", "ws", "ks"];

    /// Evaluates predictions `(μ, σ)` against targets `y`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        method: &str,
        dataset: &str,
        split: &str,
        fold: usize,
        mu: &[f64],
        sigma: &[f64],
        y: &[f64],
        bins: usize,
    ) -> Result<Self> {
        let r = normalize_residuals(mu, sigma, y, DEFAULT_SIGMA_MIN)?;
        let clamped: Vec<f64> = sigma.iter().map(|s| s.max(DEFAULT_SIGMA_MIN)).collect();
        Ok(MetricReport {
            method: method.into(),
            dataset: dataset.into(),
            split: split.into(),
            fold,
            rmse: rmse(mu, y)?,
            nll: nll_report(mu, &clamped, y)?,
            ece: ece(&r, bins)?,
            ws: wasserstein_to_std_normal(&r),
            ks: ks_to_std_normal(&r),
        })
    }

    pub fn csv_record(&self) -> [String; 9] {
        [
            self.method.clone(),
            self.dataset.clone(),
            self.split.clone(),
            self.fold.to_string(),
            self.rmse.to_string(),
            self.nll.to_string(),
            self.ece.to_string(),
            self.ws.to_string(),
            self.ks.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Writes reports as CSV with the fixed header order.
pub fn write_reports_csv<W: std::io::Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(MetricReport::CSV_HEADER)?;
    for r in reports {
        wr.write_record(r.csv_record())?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricReport>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
