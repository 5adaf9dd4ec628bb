//! The six uncertainty estimators behind one train/predict interface.
//!
//! | kind  | training                                  | σ at prediction                     |
//! |-------|-------------------------------------------|-------------------------------------|
//! | MC    | MSE on dropout sub-networks (all hidden)  | std of T sub-network outputs        |
//! | MC-LL | as MC, dropout on the last hidden layer   | as MC                               |
//! | SML   | MSE on full net + second-moment term      | σ_drop + \|f − mean sub-network\|   |
//! | PU    | Gaussian NLL on a (μ, σ) head             | the head's σ                        |
//! | DE    | 5 MSE networks                            | std of member means                 |
//! | PU-DE | 5 PU networks                             | Gaussian-mixture std                |
//!
//! Networks train on standardized inputs and targets; predictions are
//! reported in original target units unless [`Units::Standardized`] is asked for.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fit_standardizer, Dataset, Standardizer};
use crate::error::{Result, SmlError};
use crate::exec::{derive_index_seed, derive_seed, map_indexed, Execution};
use crate::losses::{gaussian_nll_point, sml_terms, DEFAULT_BETA};
use crate::netcore::{mlp_init, AdamState, DropoutMask, DropoutScope, ForwardCache, Gradients, HeadKind, Mlp};

/// Keep probability of dropout kinds (drop rate 0.1).
pub const DEFAULT_KEEP_PROB: f64 = 0.9;
/// Sub-networks drawn per prediction.
pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const DEFAULT_HIDDEN: [usize; 2] = [50, 50];
/// Bumped whenever the model dump layout changes.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "MC-LL")]
    McLl,
    #[serde(rename = "SML")]
    Sml,
    #[serde(rename = "PU")]
    Pu,
    #[serde(rename = "DE")]
    De,
    #[serde(rename = "PU-DE")]
    PuDe,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Mc,
        EstimatorKind::McLl,
        EstimatorKind::Sml,
        EstimatorKind::Pu,
        EstimatorKind::De,
        EstimatorKind::PuDe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Mc => "MC",
            EstimatorKind::McLl => "MC-LL",
            EstimatorKind::Sml => "SML",
            EstimatorKind::Pu => "PU",
            EstimatorKind::De => "DE",
            EstimatorKind::PuDe => "PU-DE",
        }
    }

    pub fn default_ensemble_size(self) -> usize {
        match self {
            EstimatorKind::De | EstimatorKind::PuDe => DEFAULT_ENSEMBLE_SIZE,
            _ => 1,
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, EstimatorKind::De | EstimatorKind::PuDe)
    }

    /// Dropout scope for sampling kinds, `None` otherwise.
    pub fn dropout_scope(self) -> Option<DropoutScope> {
        match self {
            EstimatorKind::Mc | EstimatorKind::Sml => Some(DropoutScope::AllHidden),
            EstimatorKind::McLl => Some(DropoutScope::LastHidden),
            _ => None,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            EstimatorKind::Pu | EstimatorKind::PuDe => HeadKind::MeanAndSigma,
            _ => HeadKind::Point,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = SmlError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        match norm.as_str() {
            "OURS" => Ok(EstimatorKind::Sml),
            "DE-PU" => Ok(EstimatorKind::PuDe),
            _ => EstimatorKind::ALL
                .into_iter()
                .find(|k| k.as_str() == norm)
                .ok_or_else(|| SmlError::arg(format!("unknown method {s:?}"))),
        }
    }
}

/// Optimization settings shared by every estimator kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the second-moment term (SML only).
    pub beta: f64,
    /// Keep probability of dropout kinds.
    pub keep_prob: f64,
    pub hidden: Vec<usize>,
    /// Overrides the kind's default member count.
    pub ensemble_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 100,
            learning_rate: 1e-3,
            beta: DEFAULT_BETA,
            keep_prob: DEFAULT_KEEP_PROB,
            hidden: DEFAULT_HIDDEN.to_vec(),
            ensemble_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, kind: EstimatorKind) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SmlError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SmlError::Config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(SmlError::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(SmlError::Config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if kind.dropout_scope() == Some(DropoutScope::LastHidden) && self.hidden.is_empty() {
            return Err(SmlError::Config("MC-LL needs at least one hidden layer".into()));
        }
        if kind.is_ensemble() && self.ensemble_size.is_some_and(|k| k < 2) {
            return Err(SmlError::Config("ensembles need at least 2 members".into()));
        }
        Ok(())
    }

    fn members(&self, kind: EstimatorKind) -> usize {
        self.ensemble_size.unwrap_or_else(|| kind.default_ensemble_size())
    }
}

/// Per-input predictive summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveEstimate {
    pub mu: f64,
    pub sigma_total: f64,
    /// Std of sampled sub-networks (or the σ reported by non-SML kinds).
    pub sigma_drop: f64,
    /// `|f(x) − mean sub-network output|`; zero for non-SML kinds.
    pub spread: f64,
}

impl PredictiveEstimate {
    fn plain(mu: f64, sigma: f64) -> Self {
        PredictiveEstimate {
            mu,
            sigma_total: sigma,
            sigma_drop: sigma,
            spread: 0.0,
        }
    }

    fn to_original(self, st: &Standardizer) -> Self {
        let sigma_drop = st.invert_sigma(self.sigma_drop);
        let spread = st.invert_sigma(self.spread);
        PredictiveEstimate {
            mu: st.invert_y(self.mu),
            sigma_total: sigma_drop + spread,
            sigma_drop,
            spread,
        }
    }
}

/// Target units of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Units {
    #[default]
    Original,
    Standardized,
}

/// A trained estimator together with everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub kind: EstimatorKind,
    pub members: Vec<Mlp>,
    pub config: TrainConfig,
    pub seed: u64,
    pub standardizer: Standardizer,
}

/// Mean computed around the first element so identical inputs reproduce it bit-exactly.
fn shifted_mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(first) = it.next() else { return f64::NAN };
    let n = xs.clone().count() as f64;
    first + xs.map(|x| x - first).sum::<f64>() / n
}

fn sample_mean_std(samples: &[f64]) -> (f64, f64) {
    let m = shifted_mean(samples.iter().copied());
    let var = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / samples.len() as f64;
    (m, var.sqrt())
}

/// Gaussian-mixture moments of equally weighted members `(μ_k, σ_k)`:
/// `μ = mean μ_k`, `σ² = mean(σ_k² + μ_k²) − μ²`, evaluated as
/// `mean σ_k² + mean (μ_k − μ)²`.
pub fn mixture_moments(members: &[(f64, f64)]) -> (f64, f64) {
    let mu = shifted_mean(members.iter().map(|m| m.0));
    let var_within = shifted_mean(members.iter().map(|m| m.1 * m.1));
    let var_between = members.iter().map(|m| (m.0 - mu) * (m.0 - mu)).sum::<f64>() / members.len() as f64;
    (mu, (var_within + var_between).sqrt())
}

/// Trains one network on standardized data (row-major `x` with `d` columns).
///
/// Shuffling, dropout masks and initialization draw from independent
/// streams derived from `seed`.
pub fn train_network(
    kind: EstimatorKind,
    x: &[f64],
    y: &[f64],
    d: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Mlp> {
    config.validate(kind)?;
    let n = y.len();
    if n == 0 || x.len() != n * d {
        return Err(SmlError::arg("training data shape mismatch"));
    }
    let out = if kind.head() == HeadKind::MeanAndSigma { 2 } else { 1 };
    let mut sizes = Vec::with_capacity(config.hidden.len() + 2);
    sizes.push(d);
    sizes.extend_from_slice(&config.hidden);
    sizes.push(out);
    let mut net = mlp_init(&sizes, kind.head(), derive_seed(seed, "init"))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask"));
    let mut mask: Option<DropoutMask> = match kind.dropout_scope() {
        Some(scope) => Some(net.sample_mask(config.keep_prob, scope, &mut mask_rng)?),
        None => None,
    };
    let mut adam = AdamState::new(net.param_count(), config.learning_rate);
    let mut grads = Gradients::zeros(net.param_count());
    let mut full_cache = ForwardCache::default();
    let mut sub_cache = ForwardCache::default();
    let mut order: Vec<usize> = (0..n).collect();
    let beta = config.beta;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            let inv_m = 1.0 / batch.len() as f64;
            for &i in batch {
                let xi = &x[i * d..(i + 1) * d];
                let yi = y[i];
                match kind {
                    EstimatorKind::Mc | EstimatorKind::McLl => {
                        let m = mask.as_mut().expect("dropout kind");
                        net.resample_mask(m, &mut mask_rng)?;
                        net.forward_into(xi, Some(m), &mut sub_cache)?;
                        let r = sub_cache.output()[0] - yi;
                        epoch_loss += r * r;
                        net.backward_accumulate(&sub_cache, &[2.0 * r * inv_m], &mut grads)?;
                    }
                    EstimatorKind::De => {
                        net.forward_into(xi, None, &mut full_cache)?;
                        let r = full_cache.output()[0] - yi;
                        epoch_loss += r * r;
                        net.backward_accumulate(&full_cache, &[2.0 * r * inv_m], &mut grads)?;
                    }
                    EstimatorKind::Sml => {
                        net.forward_into(xi, None, &mut full_cache)?;
                        let m = mask.as_mut().expect("dropout kind");
                        net.resample_mask(m, &mut mask_rng)?;
                        net.forward_into(xi, Some(m), &mut sub_cache)?;
                        let t = sml_terms(full_cache.output()[0], sub_cache.output()[0], yi);
                        epoch_loss += t.l_regr + beta * t.l_sml;
                        net.backward_accumulate(&full_cache, &[t.grad_full * inv_m], &mut grads)?;
                        let g_sub = beta * t.grad_sub;
                        if g_sub != 0.0 {
                            net.backward_accumulate(&sub_cache, &[g_sub * inv_m], &mut grads)?;
                        }
                    }
                    EstimatorKind::Pu | EstimatorKind::PuDe => {
                        net.forward_into(xi, None, &mut full_cache)?;
                        let o = full_cache.output();
                        let (l, dmu, dsigma) = gaussian_nll_point(o[0], o[1], yi);
                        epoch_loss += l;
                        net.backward_accumulate(&full_cache, &[dmu * inv_m, dsigma * inv_m], &mut grads)?;
                    }
                }
            }
            adam.step(net.params_mut(), grads.as_slice()).map_err(|e| match e {
                SmlError::TrainingDiverged { detail, .. } => SmlError::TrainingDiverged {
                    stage: "epoch",
                    index: epoch as u64,
                    detail,
                },
                other => other,
            })?;
        }
        if !epoch_loss.is_finite() {
            return Err(SmlError::TrainingDiverged {
                stage: "epoch",
                index: epoch as u64,
                detail: format!("{kind} training loss is {epoch_loss}"),
            });
        }
    }
    Ok(net)
}

/// Standardizes the rows `train_idx` of `data` and trains every member of `kind`.
///
/// Members differ only by their derived seeds; they train concurrently when
/// the `parallel` feature is on.
pub fn train_estimator(
    kind: EstimatorKind,
    data: &Dataset,
    train_idx: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    config.validate(kind)?;
    if config.beta == 0.0 && kind == EstimatorKind::Sml {
        log::warn!("beta = 0 trains no sub-network objective; SML uncertainties are uncontrolled dropout noise");
    }
    let st = fit_standardizer(data, train_idx)?;
    let d = data.dim();
    let mut x = Vec::with_capacity(train_idx.len() * d);
    let mut y = Vec::with_capacity(train_idx.len());
    for &i in train_idx {
        x.extend(st.apply_x(data.row(i)));
        y.push(st.apply_y(data.target(i)));
    }
    let n_members = config.members(kind);
    let members = map_indexed(n_members, Execution::Parallel, |m| {
        train_network(kind, &x, &y, d, config, derive_index_seed(seed, m as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        kind,
        members,
        config: config.clone(),
        seed,
        standardizer: st,
    })
}

impl TrainedModel {
    /// Assembles a model from already-trained members.
    pub fn from_members(
        kind: EstimatorKind,
        members: Vec<Mlp>,
        config: TrainConfig,
        seed: u64,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let first = members.first().ok_or_else(|| SmlError::arg("model needs at least one member"))?;
        if members.iter().any(|m| m.layer_sizes() != first.layer_sizes() || m.head() != kind.head()) {
            return Err(SmlError::arg("members must share architecture and head"));
        }
        if first.input_dim() != standardizer.dim() {
            return Err(SmlError::arg("standardizer dimension does not match the network input"));
        }
        Ok(TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            kind,
            members,
            config,
            seed,
            standardizer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(SmlError::arg(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `samples` masked outputs of the first member at standardized input `xs`.
    fn draw_standardized<R: Rng + ?Sized>(&self, xs: &[f64], samples: usize, rng: &mut R) -> Result<Vec<f64>> {
        let scope = self
            .kind
            .dropout_scope()
            .ok_or_else(|| SmlError::Unsupported(format!("{} has no dropout sub-networks", self.kind)))?;
        let net = &self.members[0];
        let mut mask = net.sample_mask(self.config.keep_prob, scope, rng)?;
        let mut cache = ForwardCache::default();
        let mut out = Vec::with_capacity(samples);
        for t in 0..samples {
            if t > 0 {
                net.resample_mask(&mut mask, rng)?;
            }
            net.forward_into(xs, Some(&mask), &mut cache)?;
            out.push(cache.output()[0]);
        }
        Ok(out)
    }

    fn predict_standardized<R: Rng + ?Sized>(&self, xs: &[f64], samples: usize, rng: &mut R) -> Result<PredictiveEstimate> {
        match self.kind {
            EstimatorKind::Mc | EstimatorKind::McLl => {
                if samples < 2 {
                    return Err(SmlError::arg("sampling estimators need at least 2 samples"));
                }
                let s = self.draw_standardized(xs, samples, rng)?;
                let (m, sd) = sample_mean_std(&s);
                Ok(PredictiveEstimate::plain(m, sd))
            }
            EstimatorKind::Sml => {
                if samples < 2 {
                    return Err(SmlError::arg("sampling estimators need at least 2 samples"));
                }
                let full = self.members[0].forward(xs, None)?.0[0];
                let s = self.draw_standardized(xs, samples, rng)?;
                let (m, sd) = sample_mean_std(&s);
                let spread = (full - m).abs();
                Ok(PredictiveEstimate {
                    mu: full,
                    sigma_total: sd + spread,
                    sigma_drop: sd,
                    spread,
                })
            }
            EstimatorKind::Pu => {
                let o = self.members[0].forward(xs, None)?.0;
                Ok(PredictiveEstimate::plain(o[0], o[1]))
            }
            EstimatorKind::De => {
                let outs = self
                    .members
                    .iter()
                    .map(|m| m.forward(xs, None).map(|(o, _)| o[0]))
                    .collect::<Result<Vec<_>>>()?;
                let (m, sd) = sample_mean_std(&outs);
                Ok(PredictiveEstimate::plain(m, sd))
            }
            EstimatorKind::PuDe => {
                let outs = self
                    .members
                    .iter()
                    .map(|m| m.forward(xs, None).map(|(o, _)| (o[0], o[1])))
                    .collect::<Result<Vec<_>>>()?;
                let (m, sd) = mixture_moments(&outs);
                Ok(PredictiveEstimate::plain(m, sd))
            }
        }
    }

    /// Predictive estimate at a raw (unstandardized) input.
    /// `samples` is ignored by the non-sampling kinds.
    pub fn predict<R: Rng + ?Sized>(&self, x: &[f64], samples: usize, rng: &mut R, units: Units) -> Result<PredictiveEstimate> {
        self.check_input(x)?;
        let xs = self.standardizer.apply_x(x);
        let est = self.predict_standardized(&xs, samples, rng)?;
        Ok(match units {
            Units::Standardized => est,
            Units::Original => est.to_original(&self.standardizer),
        })
    }

    /// Predictions for rows `idx` of `data`; row `k` uses an RNG seeded from `(seed, k)`.
    pub fn predict_batch(
        &self,
        data: &Dataset,
        idx: &[usize],
        samples: usize,
        seed: u64,
        units: Units,
        exec: Execution,
    ) -> Result<Vec<PredictiveEstimate>> {
        map_indexed(idx.len(), exec, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_index_seed(seed, k as u64));
            self.predict(data.row(idx[k]), samples, &mut rng, units)
        })
        .into_iter()
        .collect()
    }

    /// Raw sub-network outputs (original units) at input `x`.
    pub fn subnetwork_samples<R: Rng + ?Sized>(&self, x: &[f64], samples: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let xs = self.standardizer.apply_x(x);
        Ok(self
            .draw_standardized(&xs, samples, rng)?
            .into_iter()
            .map(|v| self.standardizer.invert_y(v))
            .collect())
    }

    /// Full-network output (original units) of the first member.
    pub fn full_output(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let xs = self.standardizer.apply_x(x);
        Ok(self.standardizer.invert_y(self.members[0].forward(&xs, None)?.0[0]))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(SmlError::Config(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        TrainedModel::from_members(m.kind, m.members, m.config, m.seed, m.standardizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainedModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_heteroskedastic_toy, kfold};

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            hidden: vec![16, 16],
            ..TrainConfig::default()
        }
    }

    fn toy() -> Dataset {
        gen_heteroskedastic_toy(300, 3).unwrap()
    }

    #[test]
    fn kind_names_parse() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("mc_ll".parse::<EstimatorKind>().unwrap(), EstimatorKind::McLl);
        assert_eq!("ours".parse::<EstimatorKind>().unwrap(), EstimatorKind::Sml);
        assert!("gp".parse::<EstimatorKind>().is_err());
        assert_eq!(serde_json::to_string(&EstimatorKind::PuDe).unwrap(), "\"PU-DE\"");
    }

    #[test]
    fn kind_defaults() {
        assert_eq!(EstimatorKind::De.default_ensemble_size(), 5);
        assert_eq!(EstimatorKind::PuDe.default_ensemble_size(), 5);
        assert_eq!(EstimatorKind::Sml.default_ensemble_size(), 1);
        assert_eq!(EstimatorKind::McLl.dropout_scope(), Some(DropoutScope::LastHidden));
        assert_eq!(EstimatorKind::De.dropout_scope(), None);
    }

    #[test]
    fn sml_without_beta_and_dropout_equals_mse_training() {
        let ds = toy();
        let x = ds.features().to_vec();
        let y = ds.targets().to_vec();
        let cfg = TrainConfig {
            beta: 0.0,
            keep_prob: 1.0,
            ..quick(5)
        };
        let sml = train_network(EstimatorKind::Sml, &x, &y, 1, &cfg, 17).unwrap();
        let mse = train_network(EstimatorKind::De, &x, &y, 1, &cfg, 17).unwrap();
        assert_eq!(sml, mse);
    }

    #[test]
    fn identical_de_members_give_zero_sigma() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let st = fit_standardizer(&ds, &idx).unwrap();
        let x: Vec<f64> = idx.iter().flat_map(|&i| st.apply_x(ds.row(i))).collect();
        let y: Vec<f64> = idx.iter().map(|&i| st.apply_y(ds.target(i))).collect();
        let net = train_network(EstimatorKind::De, &x, &y, 1, &quick(3), 5).unwrap();
        let model = TrainedModel::from_members(EstimatorKind::De, vec![net; 5], quick(3), 5, st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = model.predict(&[0.4], 2, &mut rng, Units::Original).unwrap();
        assert_eq!(e.sigma_total, 0.0);
        assert_eq!(e.mu, model.full_output(&[0.4]).unwrap());
    }

    #[test]
    fn mixture_moments_by_hand() {
        let (m, s) = mixture_moments(&[(0.0, 1.0), (2.0, 1.0)]);
        assert_eq!(m, 1.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        for &(mu, sd) in &[(1234.5678, 0.1234), (-3.0, 1e-7), (0.0, 2.5)] {
            assert_eq!(mixture_moments(&[(mu, sd); 5]), (mu, sd));
        }
    }

    #[test]
    fn sml_keep_prob_one_has_no_uncertainty() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            keep_prob: 1.0,
            ..quick(2)
        };
        let model = train_estimator(EstimatorKind::Sml, &ds, &idx, &cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = model.predict(&[1.0], 50, &mut rng, Units::Original).unwrap();
        assert_eq!((e.sigma_drop, e.spread, e.sigma_total), (0.0, 0.0, 0.0));
        let s = model.subnetwork_samples(&[1.0], 20, &mut rng).unwrap();
        assert!(s.iter().all(|&v| v == s[0]));
    }

    #[test]
    fn sml_total_is_drop_plus_spread() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let model = train_estimator(EstimatorKind::Sml, &ds, &idx, &quick(10), 2).unwrap();
        let est = model
            .predict_batch(&ds, &idx[..50], 30, 9, Units::Original, Execution::Parallel)
            .unwrap();
        for e in est {
            assert!(e.sigma_total >= 0.0);
            assert!((e.sigma_total - (e.sigma_drop + e.spread)).abs() <= 1e-12);
        }
    }

    #[test]
    fn samples_consistent_with_predict() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        for kind in [EstimatorKind::Sml, EstimatorKind::Mc] {
            let model = train_estimator(kind, &ds, &idx, &quick(5), 4).unwrap();
            let x = [0.7];
            let s = model.subnetwork_samples(&x, 100, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let e = model.predict(&x, 100, &mut ChaCha8Rng::seed_from_u64(3), Units::Original).unwrap();
            let (m, sd) = sample_mean_std(&s);
            assert!((sd - e.sigma_drop).abs() < 1e-12);
            if kind == EstimatorKind::Mc {
                assert!((m - e.mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn samples_unsupported_for_non_dropout_kinds() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let model = train_estimator(EstimatorKind::Pu, &ds, &idx, &quick(2), 4).unwrap();
        let r = model.subnetwork_samples(&[0.0], 10, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(r, Err(SmlError::Unsupported(_))));
        assert!(matches!(
            model.predict(&[0.0, 1.0], 10, &mut ChaCha8Rng::seed_from_u64(3), Units::Original),
            Err(SmlError::Argument(_))
        ));
    }

    #[test]
    fn mc_with_constant_subnetworks() {
        // Zero hidden weights make every sub-network output the output bias.
        let st = Standardizer::identity(2);
        let mut net = mlp_init(&[2, 8, 1], HeadKind::Point, 1).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        net.bias_mut(1)[0] = 1.25;
        let model = TrainedModel::from_members(EstimatorKind::Mc, vec![net], TrainConfig::default(), 0, st).unwrap();
        let e = model.predict(&[0.3, -0.2], 200, &mut ChaCha8Rng::seed_from_u64(0), Units::Original).unwrap();
        assert_eq!((e.mu, e.sigma_total), (1.25, 0.0));
    }

    #[test]
    fn linear_mask_variance_matches_closed_form() {
        // Positive weights and inputs keep every ReLU active: the output is
        // linear in the Bernoulli keep flags of the single hidden layer.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = mlp_init(&[2, 12, 1], HeadKind::Point, 2).unwrap();
        for p in net.params_mut() {
            *p = rng.gen_range(0.1..1.0);
        }
        let x = [0.4, 0.9];
        let (_, cache) = net.forward(&x, None).unwrap();
        let hidden = cache.hidden(0).to_vec();
        let keep = 0.9;
        let w2 = net.weights(1).to_vec();
        let var: f64 = hidden.iter().zip(&w2).map(|(h, w)| (h * w).powi(2)).sum::<f64>() * (1.0 - keep) / keep;
        let cfg = TrainConfig {
            keep_prob: keep,
            ..TrainConfig::default()
        };
        let model = TrainedModel::from_members(EstimatorKind::Mc, vec![net], cfg, 0, Standardizer::identity(2)).unwrap();
        let t = 100_000;
        let s = model.subnetwork_samples(&x, t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (m, sd) = sample_mean_std(&s);
        let m4 = s.iter().map(|v| (v - m).powi(4)).sum::<f64>() / t as f64;
        let se = ((m4 - sd.powi(4)) / t as f64).sqrt();
        assert!((sd * sd - var).abs() <= 3.0 * se, "sample {} closed form {} se {}", sd * sd, var, se);
    }

    #[test]
    fn training_is_deterministic_and_serializable() {
        let ds = toy();
        let folds = kfold(ds.len(), 3, 1).unwrap();
        for kind in EstimatorKind::ALL {
            let cfg = TrainConfig {
                ensemble_size: kind.is_ensemble().then_some(2),
                ..quick(2)
            };
            let a = train_estimator(kind, &ds, &folds[0].train_idx, &cfg, 99).unwrap();
            let b = train_estimator(kind, &ds, &folds[0].train_idx, &cfg, 99).unwrap();
            assert_eq!(a, b);
            let back = TrainedModel::from_json(&a.to_json().unwrap()).unwrap();
            assert_eq!(a, back);
            let pa = a.predict_batch(&ds, &folds[0].test_idx, 10, 5, Units::Original, Execution::Parallel).unwrap();
            let pb = back.predict_batch(&ds, &folds[0].test_idx, 10, 5, Units::Original, Execution::Sequential).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..quick(3)
        };
        let r = train_estimator(EstimatorKind::Pu, &ds, &idx, &cfg, 1);
        assert!(matches!(r, Err(SmlError::TrainingDiverged { .. })), "{r:?}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            keep_prob: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate(EstimatorKind::Sml).is_err());
        let bad = TrainConfig {
            ensemble_size: Some(1),
            ..TrainConfig::default()
        };
        assert!(bad.validate(EstimatorKind::De).is_err());
        assert!(TrainConfig::default().validate(EstimatorKind::PuDe).is_ok());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let ds = toy();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let m = train_estimator(EstimatorKind::De, &ds, &idx, &TrainConfig { ensemble_size: Some(2), ..quick(1) }, 1).unwrap();
        let j = m.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(TrainedModel::from_json(&j), Err(SmlError::Config(_))));
    }
}
