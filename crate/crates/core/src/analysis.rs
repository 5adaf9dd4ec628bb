//! Analytical and diagnostic tools around the second-moment objective.
//!
//! With residual `y1 ~ N(0, 1)` and sub-network deviation `y2 ~ N(μ, σ)`,
//! `E(|y1| − |y2|)²` has the closed form implemented by [`sml_landscape`].
//! Its minimum over `μ` sits at `μ = √(2/π)` for `σ = 0` and moves to
//! `μ = 0` once `σ ≥ 2/π`.

use std::f64::consts::{FRAC_2_PI, PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SmlError};
use crate::estimators::{PredictiveEstimate, TrainedModel};
use crate::exec::{derive_index_seed, map_indexed, Execution};
use crate::metrics::{pearson, MetricReport};
use crate::stats::erf;

/// Below this σ the closed form switches to its σ → 0 limit.
pub const SIGMA_LIMIT: f64 = 1e-12;
pub const ARGMIN_BRACKET: (f64, f64) = (0.0, 3.0);
pub const ARGMIN_TOLERANCE: f64 = 1e-6;
/// Argmin values below this count as the symmetric (μ = 0) minimum.
pub const BIFURCATION_THRESHOLD: f64 = 1e-3;
const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub mu_drop: f64,
    pub sigma_drop: f64,
    pub loss: f64,
}

/// Closed-form `E(|y1| − |y2|)²` for `y1 ~ N(0, 1)`, `y2 ~ N(μ, σ)`.
pub fn sml_landscape(mu: f64, sigma: f64) -> f64 {
    let sigma = sigma.abs();
    if sigma < SIGMA_LIMIT {
        return 1.0 + mu * mu - (8.0 / PI).sqrt() * mu.abs();
    }
    -(4.0 / PI) * sigma * (-mu * mu / (2.0 * sigma * sigma)).exp() - (8.0 / PI).sqrt() * mu * erf(mu / (SQRT_2 * sigma))
        + sigma * sigma
        + mu * mu
        + 1.0
}

/// Monte-Carlo estimate of the landscape with general residual parameters
/// `y1 ~ N(res_mu, res_sigma)`. Returns `(mean, standard error)`.
pub fn sml_landscape_mc_general(
    mu: f64,
    sigma: f64,
    res_mu: f64,
    res_sigma: f64,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    if n < 1000 {
        return Err(SmlError::arg(format!("Monte-Carlo landscape needs n >= 1000, got {n}")));
    }
    if sigma < 0.0 || res_sigma < 0.0 {
        return Err(SmlError::arg("standard deviations must be non-negative"));
    }
    let chunks = n.div_ceil(MC_CHUNK);
    // Fixed-size chunks with index-derived seeds make the result independent of scheduling.
    let parts = map_indexed(chunks, exec, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_index_seed(seed, c as u64));
        let len = MC_CHUNK.min(n - c * MC_CHUNK);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..len {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let v = ((res_mu + res_sigma * z1).abs() - (mu + sigma * z2).abs()).powi(2);
            s += v;
            s2 += v * v;
        }
        (s, s2)
    });
    let (s, s2) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Monte-Carlo oracle for [`sml_landscape`].
pub fn sml_landscape_mc(mu: f64, sigma: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    sml_landscape_mc_general(mu, sigma, 0.0, 1.0, n, seed, Execution::Parallel)
}

/// Minimizer of the landscape over `μ ∈ [0, 3]` at fixed σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArgminPoint {
    pub sigma: f64,
    pub mu: f64,
    pub loss: f64,
    /// The search ended within tolerance of a bracket end.
    pub boundary: bool,
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let (a0, b0) = (a, b);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let m = 0.5 * (a + b);
    // Golden-section never evaluates the endpoints; compare them explicitly.
    [m, a0, b0]
        .into_iter()
        .min_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap_or(m)
}

/// Per-σ minimizing μ of the landscape.
pub fn landscape_argmin_mu(sigma_grid: &[f64]) -> Result<Vec<ArgminPoint>> {
    sigma_grid
        .iter()
        .map(|&sigma| {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(SmlError::arg(format!("σ grid value {sigma} is not a finite non-negative number")));
            }
            let (lo, hi) = ARGMIN_BRACKET;
            let mu = golden_section(|m| sml_landscape(m, sigma), lo, hi, ARGMIN_TOLERANCE);
            Ok(ArgminPoint {
                sigma,
                mu,
                loss: sml_landscape(mu, sigma),
                boundary: mu - lo <= ARGMIN_TOLERANCE || hi - mu <= ARGMIN_TOLERANCE,
            })
        })
        .collect()
}

/// Smallest σ whose argmin falls below [`BIFURCATION_THRESHOLD`], by bisection on `[0, 2]`.
pub fn bifurcation_sigma() -> f64 {
    let at_zero = |s: f64| {
        let m = golden_section(|m| sml_landscape(m, s), ARGMIN_BRACKET.0, ARGMIN_BRACKET.1, ARGMIN_TOLERANCE);
        m < BIFURCATION_THRESHOLD
    };
    let (mut lo, mut hi) = (0.0, 2.0);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if at_zero(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `2/π`: σ above which the symmetric minimum is the only one.
pub fn bifurcation_sigma_exact() -> f64 {
    FRAC_2_PI
}

/// Shares of σ_total contributed by sub-network std and full/sub-network spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaDecomposition {
    /// Per-point `σ_drop / σ_total`.
    pub dropout_std: Vec<f64>,
    /// Per-point `spread / σ_total`.
    pub spread: Vec<f64>,
    pub fraction_dropout_std: f64,
    pub fraction_spread: f64,
    /// Points with `σ_total = 0`, left out of the fractions.
    pub excluded: usize,
}

pub fn decompose_sigma(estimates: &[PredictiveEstimate]) -> Result<SigmaDecomposition> {
    let mut dropout_std = Vec::with_capacity(estimates.len());
    let mut spread = Vec::with_capacity(estimates.len());
    let mut excluded = 0;
    for e in estimates {
        if e.sigma_total > 0.0 {
            let fd = e.sigma_drop / e.sigma_total;
            dropout_std.push(fd);
            spread.push(1.0 - fd);
        } else {
            excluded += 1;
        }
    }
    if dropout_std.is_empty() {
        return Err(SmlError::EmptyDecomposition { excluded });
    }
    let n = dropout_std.len() as f64;
    let fraction_dropout_std = dropout_std.iter().sum::<f64>() / n;
    Ok(SigmaDecomposition {
        fraction_spread: 1.0 - fraction_dropout_std,
        fraction_dropout_std,
        dropout_std,
        spread,
        excluded,
    })
}

/// Residual `a` of the full network and `T` sub-network deviations `b` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComponents {
    pub point_id: usize,
    pub a: f64,
    pub b: Vec<f64>,
}

/// `a_i = f(x_i) − y_i` and `b_i = f̃(x_i) − f(x_i)` for `samples` sub-networks per row
/// of `idx`, in standardized target units.
pub fn loss_component_export(
    model: &TrainedModel,
    data: &Dataset,
    idx: &[usize],
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<LossComponents>> {
    let st = &model.standardizer;
    map_indexed(idx.len(), exec, |k| {
        let i = idx[k];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_index_seed(seed, k as u64));
        let full = st.apply_y(model.full_output(data.row(i))?);
        let subs = model.subnetwork_samples(data.row(i), samples, &mut rng)?;
        Ok(LossComponents {
            point_id: i,
            a: full - st.apply_y(data.target(i)),
            b: subs.into_iter().map(|s| st.apply_y(s) - full).collect(),
        })
    })
    .into_iter()
    .collect()
}

/// Long-format CSV with columns `point_id, a, b_sample_idx, b`.
pub fn write_components_csv<W: std::io::Write>(w: W, comps: &[LossComponents]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["point_id", "a", "b_sample_idx", "b"])?;
    for c in comps {
        for (t, b) in c.b.iter().enumerate() {
            wr.write_record([c.point_id.to_string(), c.a.to_string(), t.to_string(), b.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub const CORRELATION_METRICS: [&str; 3] = ["ece", "ws", "ks"];

/// Pairwise Pearson correlations among ECE, WS and KS over a set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelations {
    pub names: [String; 3],
    pub matrix: [[f64; 3]; 3],
}

impl MetricCorrelations {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["metric", "ece", "ws", "ks"])?;
        for (name, row) in self.names.iter().zip(&self.matrix) {
            wr.write_record([name.clone(), row[0].to_string(), row[1].to_string(), row[2].to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn metric_correlations(reports: &[MetricReport]) -> Result<MetricCorrelations> {
    if reports.len() < 3 {
        return Err(SmlError::arg(format!(
            "metric correlations need at least 3 reports, got {}",
            reports.len()
        )));
    }
    let cols: [Vec<f64>; 3] = [
        reports.iter().map(|r| r.ece).collect(),
        reports.iter().map(|r| r.ws).collect(),
        reports.iter().map(|r| r.ks).collect(),
    ];
    for (name, c) in CORRELATION_METRICS.iter().zip(&cols) {
        if c.iter().all(|v| *v == c[0]) || c.iter().any(|v| !v.is_finite()) {
            return Err(SmlError::UndefinedCorrelation(format!("{name} has no finite variance across reports")));
        }
    }
    let mut matrix = [[1.0; 3]; 3];
    for i in 0..3 {
        for j in (i + 1)..3 {
            let r = pearson(&cols[i], &cols[j])?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(MetricCorrelations {
        names: CORRELATION_METRICS.map(String::from),
        matrix,
    })
}

/// Scatter-ready `method, dataset, split, fold, ece, ws, ks` rows.
pub fn write_metric_triples_csv<W: std::io::Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["method", "dataset", "split", "fold", "ece", "ws", "ks"])?;
    for r in reports {
        wr.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.split.clone(),
            r.fold.to_string(),
            r.ece.to_string(),
            r.ws.to_string(),
            r.ks.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_heteroskedastic_toy;
    use crate::estimators::{train_estimator, EstimatorKind, TrainConfig};
    use crate::losses::{sml_batch_loss, SmlBatchTerms};
    use proptest::prelude::*;

    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    #[test]
    fn landscape_examples() {
        assert_eq!(sml_landscape(0.0, 0.0), 1.0);
        assert!((sml_landscape(SQRT_2_OVER_PI, 0.0) - (1.0 - FRAC_2_PI)).abs() < 1e-15);
        assert!((sml_landscape(0.0, FRAC_2_PI) - (1.0 - 4.0 / (PI * PI))).abs() < 1e-15);
    }

    #[test]
    fn limit_branch_is_continuous() {
        for mu in [-1.5, -0.3, 0.0, 0.4, 2.0] {
            let lim = sml_landscape(mu, 0.0);
            let near = sml_landscape(mu, 1e-9);
            assert!((lim - near).abs() < 1e-8, "mu {mu}: {lim} vs {near}");
        }
    }

    #[test]
    fn slope_vanishes_at_bifurcation() {
        let h = 1e-5;
        let s = FRAC_2_PI;
        let slope = (sml_landscape(0.0, s + h) - sml_landscape(0.0, s - h)) / (2.0 * h);
        assert!(slope.abs() < 1e-4);
    }

    #[test]
    fn closed_form_matches_monte_carlo_oracle() {
        for (k, (mu, sigma)) in [(0.0, 0.0), (SQRT_2_OVER_PI, 0.0), (1.0, 0.5), (0.3, 1.7)].into_iter().enumerate() {
            let (est, se) = sml_landscape_mc(mu, sigma, 100_000, k as u64).unwrap();
            let cf = sml_landscape(mu, sigma);
            assert!((est - cf).abs() <= 3.0 * se, "({mu}, {sigma}): mc {est} ± {se}, closed {cf}");
        }
    }

    #[test]
    fn mc_rejects_small_n_and_is_execution_independent() {
        assert!(sml_landscape_mc(0.0, 1.0, 10, 0).is_err());
        let a = sml_landscape_mc_general(0.5, 0.5, 0.0, 1.0, 200_000, 3, Execution::Sequential).unwrap();
        let b = sml_landscape_mc_general(0.5, 0.5, 0.0, 1.0, 200_000, 3, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmin_examples() {
        let pts = landscape_argmin_mu(&[0.0, 1.0]).unwrap();
        assert!((pts[0].mu - SQRT_2_OVER_PI).abs() < 1e-4);
        assert!((pts[0].loss - (1.0 - FRAC_2_PI)).abs() < 1e-9);
        assert!(!pts[0].boundary);
        assert!(pts[1].mu < 1e-4);
        assert!(pts[1].boundary);
        assert!(landscape_argmin_mu(&[-0.1]).is_err());
    }

    #[test]
    fn argmin_curve_against_dense_grid() {
        let sigmas: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
        let curve = landscape_argmin_mu(&sigmas).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].mu <= w[0].mu + 1e-5);
        }
        for p in &curve {
            let brute = (0..=30_000)
                .map(|j| j as f64 * 1e-4)
                .min_by(|a, b| sml_landscape(*a, p.sigma).total_cmp(&sml_landscape(*b, p.sigma)))
                .unwrap();
            // Near the bifurcation the minimum is flat to fourth order in μ.
            let tol = if (p.sigma - FRAC_2_PI).abs() < 0.05 { 5e-2 } else { 1e-3 };
            assert!((p.mu - brute).abs() < tol, "σ {}: {} vs {}", p.sigma, p.mu, brute);
        }
        assert!((bifurcation_sigma() - FRAC_2_PI).abs() < 0.01);
    }

    #[test]
    fn decomposition_examples() {
        let e = |d: f64, s: f64| PredictiveEstimate {
            mu: 0.0,
            sigma_total: d + s,
            sigma_drop: d,
            spread: s,
        };
        let d = decompose_sigma(&[e(1.0, 0.0), e(0.2, 0.0)]).unwrap();
        assert_eq!(d.fraction_dropout_std, 1.0);
        let d = decompose_sigma(&[e(0.5, 0.5), e(0.0, 0.0)]).unwrap();
        assert_eq!((d.fraction_dropout_std, d.fraction_spread, d.excluded), (0.5, 0.5, 1));
        assert!(matches!(
            decompose_sigma(&[e(0.0, 0.0)]),
            Err(SmlError::EmptyDecomposition { excluded: 1 })
        ));
    }

    fn report(ece: f64, ws: f64, ks: f64) -> MetricReport {
        MetricReport {
            method: "SML".into(),
            dataset: "toy".into(),
            split: "iid_test".into(),
            fold: 0,
            rmse: 1.0,
            nll: 1.0,
            ece,
            ws,
            ks,
        }
    }

    #[test]
    fn correlation_examples() {
        let reps: Vec<MetricReport> = [0.1, 0.4, 0.2, 0.9].iter().map(|&e| report(e, 2.0 * e, e * e)).collect();
        let c = metric_correlations(&reps).unwrap();
        assert!((c.matrix[0][1] - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert_eq!(c.matrix[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(c.matrix[i][j], c.matrix[j][i]);
            }
        }
        assert!(metric_correlations(&reps[..1]).is_err());
        let flat: Vec<MetricReport> = (0..4).map(|i| report(i as f64, 1.0, i as f64)).collect();
        match metric_correlations(&flat) {
            Err(SmlError::UndefinedCorrelation(m)) => assert!(m.contains("ws")),
            other => panic!("{other:?}"),
        }
    }

    fn small_model(kind: EstimatorKind, keep_prob: f64) -> (TrainedModel, Dataset) {
        let ds = gen_heteroskedastic_toy(200, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 50,
            hidden: vec![16, 16],
            keep_prob,
            ..TrainConfig::default()
        };
        (train_estimator(kind, &ds, &idx, &cfg, 5).unwrap(), ds)
    }

    #[test]
    fn components_without_dropout_are_zero() {
        let (m, ds) = small_model(EstimatorKind::Sml, 1.0);
        let comps = loss_component_export(&m, &ds, &[0, 1, 2], 7, 0, Execution::Parallel).unwrap();
        assert_eq!(comps.iter().map(|c| c.b.len()).sum::<usize>(), 21);
        assert!(comps.iter().all(|c| c.b.iter().all(|&b| b.abs() < 1e-12)));
        let mut buf = Vec::new();
        write_components_csv(&mut buf, &comps).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 22);
    }

    #[test]
    fn components_reproduce_batch_loss() {
        let (m, ds) = small_model(EstimatorKind::Sml, 0.9);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let t = 200;
        let comps = loss_component_export(&m, &ds, &idx, t, 4, Execution::Parallel).unwrap();
        // Per-point sample averages estimate the expected per-point loss.
        let beta = 0.5;
        let per_point: Vec<f64> = comps
            .iter()
            .map(|c| c.a * c.a + beta * c.b.iter().map(|b| (b.abs() - c.a.abs()).powi(2)).sum::<f64>() / t as f64)
            .collect();
        let avg = per_point.iter().sum::<f64>() / per_point.len() as f64;
        // One sub-network draw per point, as in a training batch.
        let terms = SmlBatchTerms::new(
            comps.iter().map(|c| c.a).collect(),
            comps.iter().map(|c| c.b[0]).collect(),
            beta,
        )
        .unwrap();
        let single = sml_batch_loss(&terms);
        let draws: Vec<f64> = comps
            .iter()
            .map(|c| c.a * c.a + beta * (c.b[0].abs() - c.a.abs()).powi(2))
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!((single - mean).abs() < 1e-12);
        assert!((single - avg).abs() <= 3.0 * se, "batch {single} vs expected {avg} (se {se})");
    }

    proptest! {
        #[test]
        fn landscape_is_even_in_mu(mu in -5.0f64..5.0, sigma in 0.0f64..3.0) {
            prop_assert_eq!(sml_landscape(mu, sigma), sml_landscape(-mu, sigma));
        }

        #[test]
        fn landscape_bounded_below_by_minimum(mu in -3.0f64..3.0, sigma in 0.0f64..3.0) {
            prop_assert!(sml_landscape(mu, sigma) >= 1.0 - FRAC_2_PI - 1e-12);
        }
    }
}
