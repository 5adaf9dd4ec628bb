//! Experiment orchestration behind the `sml` command line.
//!
//! A run trains one model per (method, split job) and evaluates it. IID
//! folds train once and are evaluated on both their train and test rows;
//! each held chunk of a directional split is its own job, with the chunk
//! index reported as the fold. Every job seeds itself from the root seed
//! and its own label, so adding a method or split leaves the other jobs'
//! results unchanged.
//!
//! Metrics are computed in standardized target units (train-fold
//! statistics), which makes RMSE and calibration comparable across datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    bifurcation_sigma, landscape_argmin_mu, loss_component_export, metric_correlations, sml_landscape,
    sml_landscape_mc_general, write_components_csv, write_metric_triples_csv, ArgminPoint,
};
use crate::data::{
    direction_scores, directional_split, kfold, resolve_dataset, Dataset, DatasetSchema, DatasetSplit, SizeClass,
    SplitKind, DEFAULT_CHUNK_COUNT,
};
use crate::error::{Result, SmlError};
use crate::estimators::{train_estimator, EstimatorKind, TrainConfig, TrainedModel, Units, DEFAULT_KEEP_PROB, DEFAULT_SAMPLES};
use crate::exec::{derive_seed, map_indexed, with_worker_pool, Execution};
use crate::losses::DEFAULT_BETA;
use crate::metrics::{read_reports_csv, write_reports_csv, MetricReport, DEFAULT_ECE_BINS};
use crate::stats::{mean, median};

pub const DEFAULT_TOY_SIZE: usize = 2000;
pub const SWEEP_BETAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Settings of `run` and `sweep-beta`. Unset optional fields resolve from
/// the dataset's size class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub methods: Vec<EstimatorKind>,
    pub splits: Vec<SplitKind>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta: f64,
    pub keep_prob: f64,
    /// Sub-networks sampled per prediction.
    pub samples: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    pub ensemble_size: Option<usize>,
    pub chunk_count: usize,
    /// Rows generated for the `toy` dataset.
    pub toy_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub save_models: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "toy".into(),
            data_path: None,
            schema: None,
            methods: vec![EstimatorKind::Sml, EstimatorKind::Mc],
            splits: vec![SplitKind::IidTrain, SplitKind::IidTest],
            folds: None,
            epochs: None,
            batch_size: None,
            learning_rate: None,
            beta: DEFAULT_BETA,
            keep_prob: DEFAULT_KEEP_PROB,
            samples: DEFAULT_SAMPLES,
            bins: DEFAULT_ECE_BINS,
            hidden: crate::estimators::DEFAULT_HIDDEN.to_vec(),
            ensemble_size: None,
            chunk_count: DEFAULT_CHUNK_COUNT,
            toy_size: DEFAULT_TOY_SIZE,
            seed: 0,
            out: PathBuf::from("sml-out"),
            jobs: 0,
            save_models: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(SmlError::Config("no methods selected".into()));
        }
        if self.splits.is_empty() {
            return Err(SmlError::Config("no split kinds selected".into()));
        }
        if self.folds.is_some_and(|k| k < 2) {
            return Err(SmlError::Config("folds must be at least 2".into()));
        }
        if self.bins < 2 {
            return Err(SmlError::Config("bins must be at least 2".into()));
        }
        if self.samples < 2 {
            return Err(SmlError::Config("samples must be at least 2".into()));
        }
        if self.chunk_count < 3 {
            return Err(SmlError::Config("chunk_count must be at least 3".into()));
        }
        if self.dataset.trim().is_empty() {
            return Err(SmlError::Config("dataset name is empty".into()));
        }
        for m in &self.methods {
            self.train_config(SizeClass::Small, "").validate(*m)?;
        }
        Ok(())
    }

    /// Fold count after size-class defaults.
    pub fn resolved_folds(&self, size_class: SizeClass) -> usize {
        self.folds.unwrap_or(match size_class {
            SizeClass::Small => 10,
            SizeClass::Large | SizeClass::VeryLarge => 5,
        })
    }

    /// Training settings after size-class and per-dataset defaults.
    pub fn train_config(&self, size_class: SizeClass, dataset: &str) -> TrainConfig {
        let (epochs, batch) = match size_class {
            SizeClass::Small => (1000, 100),
            SizeClass::Large => (150, 100),
            SizeClass::VeryLarge => (150, 500),
        };
        let lr = if dataset == "california" { 1e-4 } else { 1e-3 };
        TrainConfig {
            epochs: self.epochs.unwrap_or(epochs),
            batch_size: self.batch_size.unwrap_or(batch),
            learning_rate: self.learning_rate.unwrap_or(lr),
            beta: self.beta,
            keep_prob: self.keep_prob,
            hidden: self.hidden.clone(),
            ensemble_size: self.ensemble_size,
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let schema = self.schema.as_deref().map(DatasetSchema::from_json_file).transpose()?;
        resolve_dataset(
            &self.dataset,
            self.data_path.as_deref(),
            schema.as_ref(),
            self.toy_size,
            derive_seed(self.seed, "toy"),
        )
    }
}

/// One training job: a method on one split.
#[derive(Debug, Clone)]
struct Job {
    method: EstimatorKind,
    split: DatasetSplit,
    /// Split kinds evaluated with this job's model.
    evaluate: Vec<SplitKind>,
    label: String,
}

/// A run that raised an error instead of producing reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub method: String,
    pub split: String,
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub reports: Vec<MetricReport>,
    pub failures: Vec<RunFailure>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn build_splits(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<(DatasetSplit, Vec<SplitKind>)>> {
    let mut out = Vec::new();
    let iid: Vec<SplitKind> = SplitKind::ALL
        .into_iter()
        .filter(|k| k.is_iid() && cfg.splits.contains(k))
        .collect();
    if !iid.is_empty() {
        let k = cfg.resolved_folds(data.size_class);
        for split in kfold(data.len(), k, derive_seed(cfg.seed, "kfold"))? {
            out.push((split, iid.clone()));
        }
    }
    let c = cfg.chunk_count;
    let mut scores = BTreeMap::new();
    for kind in SplitKind::ALL.into_iter().filter(|k| !k.is_iid() && cfg.splits.contains(k)) {
        let dir = kind.direction().expect("shift kinds have a direction");
        if !scores.contains_key(&dir) {
            scores.insert(dir, direction_scores(data, dir)?);
        }
        let held: Vec<usize> = if matches!(kind, SplitKind::PcaExtrap | SplitKind::LabelExtrap) {
            vec![0, c - 1]
        } else {
            (1..c - 1).collect()
        };
        for h in held {
            out.push((directional_split(&scores[&dir], dir, c, h)?, vec![kind]));
        }
    }
    Ok(out)
}

fn split_label(split: &DatasetSplit) -> &'static str {
    if split.kind.is_iid() {
        "iid"
    } else {
        split.kind.as_str()
    }
}

fn run_job(cfg: &ExperimentConfig, data: &Dataset, job: &Job, models_dir: Option<&Path>) -> Result<Vec<MetricReport>> {
    let seed = derive_seed(cfg.seed, &job.label);
    let tc = cfg.train_config(data.size_class, &data.name);
    let model = train_estimator(job.method, data, &job.split.train_idx, &tc, seed)?;
    if let Some(dir) = models_dir {
        model.save(&dir.join(format!("{}.json", job.label.replace('/', "_"))))?;
    }
    let st = &model.standardizer;
    let mut reports = Vec::with_capacity(job.evaluate.len());
    for &kind in &job.evaluate {
        let idx = if kind == SplitKind::IidTrain {
            &job.split.train_idx
        } else {
            &job.split.test_idx
        };
        let pred_seed = derive_seed(seed, kind.as_str());
        let est = model.predict_batch(data, idx, cfg.samples, pred_seed, Units::Standardized, Execution::Parallel)?;
        let mu: Vec<f64> = est.iter().map(|e| e.mu).collect();
        let sigma: Vec<f64> = est.iter().map(|e| e.sigma_total).collect();
        let y: Vec<f64> = idx.iter().map(|&i| st.apply_y(data.target(i))).collect();
        reports.push(MetricReport::evaluate(
            job.method.as_str(),
            &data.name,
            kind.as_str(),
            job.split.fold,
            &mu,
            &sigma,
            &y,
            cfg.bins,
        )?);
    }
    Ok(reports)
}

/// Trains and evaluates every (method, split) job and writes the run artifacts to `cfg.out`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let splits = build_splits(cfg, &data)?;
    fs::create_dir_all(&cfg.out)?;
    let split_dir = cfg.out.join("splits");
    fs::create_dir_all(&split_dir)?;
    for (s, _) in &splits {
        fs::write(split_dir.join(format!("{}_{}.json", split_label(s), s.fold)), s.to_json()?)?;
    }
    let models_dir = cfg.out.join("models");
    if cfg.save_models {
        fs::create_dir_all(&models_dir)?;
    }
    let name = data.name.as_str();
    let jobs: Vec<Job> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            splits.iter().map(move |(s, eval)| Job {
                method: m,
                split: s.clone(),
                evaluate: eval.clone(),
                label: format!("{}/{}/{}/{}", name, m.as_str(), split_label(s), s.fold),
            })
        })
        .collect();
    log::info!("{}: {} rows, {} jobs", data.name, data.len(), jobs.len());
    let results = with_worker_pool(cfg.jobs, || {
        map_indexed(jobs.len(), Execution::Parallel, |j| {
            let r = run_job(cfg, &data, &jobs[j], cfg.save_models.then_some(models_dir.as_path()));
            if let Err(e) = &r {
                log::warn!("{} failed: {e}", jobs[j].label);
            }
            r
        })
    });
    let mut outcome = RunOutcome::default();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(reps) => outcome.reports.extend(reps),
            Err(e) => {
                for kind in &job.evaluate {
                    outcome.failures.push(RunFailure {
                        method: job.method.as_str().into(),
                        split: kind.as_str().into(),
                        fold: job.split.fold,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    // Order rows by (method, split, fold) independently of job scheduling.
    let order = |m: &str, s: &str| {
        (
            cfg.methods.iter().position(|k| k.as_str() == m),
            SplitKind::ALL.iter().position(|k| k.as_str() == s),
        )
    };
    outcome
        .reports
        .sort_by(|a, b| (order(&a.method, &a.split), a.fold).cmp(&(order(&b.method, &b.split), b.fold)));
    write_run_artifacts(&cfg.out, &outcome)?;
    Ok(outcome)
}

fn write_run_artifacts(out: &Path, outcome: &RunOutcome) -> Result<()> {
    write_reports_csv(fs::File::create(out.join("reports.csv"))?, &outcome.reports)?;
    fs::write(out.join("reports.json"), serde_json::to_string_pretty(&outcome.reports)?)?;
    write_summary_csv(fs::File::create(out.join("summary.csv"))?, &outcome.reports)?;
    fs::write(out.join("failures.json"), serde_json::to_string_pretty(&outcome.failures)?)?;
    Ok(())
}

/// Mean and median of each metric per (method, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub statistic: String,
    pub count: usize,
    pub rmse: f64,
    pub nll: f64,
    pub ece: f64,
    pub ws: f64,
    pub ks: f64,
}

pub fn summarize(reports: &[MetricReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method.clone(), r.split.clone())).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len() * 2);
    for ((method, split), rs) in groups {
        let col = |f: fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let cols = [col(|r| r.rmse), col(|r| r.nll), col(|r| r.ece), col(|r| r.ws), col(|r| r.ks)];
        for (name, stat) in [("mean", mean as fn(&[f64]) -> f64), ("median", median)] {
            let v: Vec<f64> = cols.iter().map(|c| stat(c)).collect();
            rows.push(SummaryRow {
                method: method.clone(),
                split: split.clone(),
                statistic: name.into(),
                count: rs.len(),
                rmse: v[0],
                nll: v[1],
                ece: v[2],
                ws: v[3],
                ks: v[4],
            });
        }
    }
    rows
}

pub fn write_summary_csv<W: std::io::Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in summarize(reports) {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Runs [`cmd_run`] once per β into `out/beta_<β>` and writes a combined `sweep.csv`.
pub fn cmd_sweep_beta(cfg: &ExperimentConfig, betas: &[f64]) -> Result<Vec<(f64, RunOutcome)>> {
    if !cfg.methods.contains(&EstimatorKind::Sml) {
        return Err(SmlError::Config("sweep-beta needs SML among the methods".into()));
    }
    if betas.is_empty() {
        return Err(SmlError::Config("no beta values given".into()));
    }
    let mut results = Vec::with_capacity(betas.len());
    for &beta in betas {
        if beta == 0.0 {
            log::warn!("beta = 0 leaves sub-networks untrained; their spread is uncontrolled dropout noise");
        }
        let sub = ExperimentConfig {
            beta,
            out: cfg.out.join(format!("beta_{beta}")),
            ..cfg.clone()
        };
        results.push((beta, cmd_run(&sub)?));
    }
    fs::create_dir_all(&cfg.out)?;
    let mut wr = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    let mut header = vec!["beta"];
    header.extend(MetricReport::CSV_HEADER);
    wr.write_record(&header)?;
    for (beta, outcome) in &results {
        for r in &outcome.reports {
            let mut rec = vec![beta.to_string()];
            rec.extend(r.csv_record());
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(results)
}

/// Grid and Monte-Carlo settings of `landscape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_steps: usize,
    pub sigma_max: f64,
    pub sigma_steps: usize,
    /// Monte-Carlo samples per grid point; 0 writes the closed form only.
    pub mc_n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            mu_min: -2.0,
            mu_max: 2.0,
            mu_steps: 81,
            sigma_max: 2.0,
            sigma_steps: 41,
            mc_n: 0,
            seed: 0,
            out: PathBuf::from("sml-landscape"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeOutcome {
    pub argmin: Vec<ArgminPoint>,
    pub bifurcation: f64,
}

fn grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
}

/// Writes `landscape.csv` and `argmin.csv`; returns the argmin curve and bifurcation estimate.
pub fn cmd_landscape(cfg: &LandscapeConfig) -> Result<LandscapeOutcome> {
    if cfg.mu_steps == 0 || cfg.sigma_steps == 0 || !(cfg.mu_max >= cfg.mu_min) || !(cfg.sigma_max >= 0.0) {
        return Err(SmlError::Config("landscape grid is empty or inverted".into()));
    }
    if cfg.mc_n > 0 && cfg.mc_n < 1000 {
        return Err(SmlError::Config("mc_n must be 0 or at least 1000".into()));
    }
    let mus = grid(cfg.mu_min, cfg.mu_max, cfg.mu_steps);
    let sigmas = grid(0.0, cfg.sigma_max, cfg.sigma_steps);
    fs::create_dir_all(&cfg.out)?;

    let points: Vec<(f64, f64)> = sigmas.iter().flat_map(|&s| mus.iter().map(move |&m| (m, s))).collect();
    let mc = map_indexed(points.len(), Execution::Parallel, |i| {
        let (m, s) = points[i];
        if cfg.mc_n == 0 {
            return Ok(None);
        }
        let seed = derive_seed(cfg.seed, &format!("landscape/{i}"));
        sml_landscape_mc_general(m, s, 0.0, 1.0, cfg.mc_n, seed, Execution::Sequential).map(Some)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut wr = csv::Writer::from_path(cfg.out.join("landscape.csv"))?;
    if cfg.mc_n > 0 {
        wr.write_record(["mu", "sigma", "loss", "mc_estimate", "mc_se"])?;
    } else {
        wr.write_record(["mu", "sigma", "loss"])?;
    }
    for (&(m, s), mc) in points.iter().zip(&mc) {
        let mut rec = vec![m.to_string(), s.to_string(), sml_landscape(m, s).to_string()];
        if let Some((est, se)) = mc {
            rec.push(est.to_string());
            rec.push(se.to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;

    let argmin = landscape_argmin_mu(&sigmas)?;
    let mut wr = csv::Writer::from_path(cfg.out.join("argmin.csv"))?;
    wr.write_record(["sigma", "argmin_mu", "loss", "boundary"])?;
    for p in &argmin {
        wr.write_record([p.sigma.to_string(), p.mu.to_string(), p.loss.to_string(), p.boundary.to_string()])?;
    }
    wr.flush()?;
    Ok(LandscapeOutcome {
        argmin,
        bifurcation: bifurcation_sigma(),
    })
}

/// Merges `reports.csv` of several run directories into `out`: merged reports,
/// summary, metric correlations and scatter triples.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<MetricReport>> {
    if run_dirs.is_empty() {
        return Err(SmlError::Config("no run directories given".into()));
    }
    let mut reports = Vec::new();
    for dir in run_dirs {
        reports.extend(read_reports_csv(fs::File::open(dir.join("reports.csv"))?)?);
    }
    fs::create_dir_all(out)?;
    write_reports_csv(fs::File::create(out.join("reports.csv"))?, &reports)?;
    write_summary_csv(fs::File::create(out.join("summary.csv"))?, &reports)?;
    write_metric_triples_csv(fs::File::create(out.join("metric_triples.csv"))?, &reports)?;
    match metric_correlations(&reports) {
        Ok(c) => c.write_csv(fs::File::create(out.join("correlations.csv"))?)?,
        Err(e) => log::warn!("correlation matrix skipped: {e}"),
    }
    Ok(reports)
}

/// Writes the loss components of a saved SML or MC model on the rows of
/// `split` (test rows) or on every row.
pub fn cmd_export_components(
    model_path: &Path,
    data: &Dataset,
    split: Option<&DatasetSplit>,
    samples: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<usize> {
    let model = TrainedModel::load(model_path)?;
    if !matches!(model.kind, EstimatorKind::Sml | EstimatorKind::Mc | EstimatorKind::McLl) {
        return Err(SmlError::Unsupported(format!("{} has no sub-networks to export", model.kind)));
    }
    let idx: Vec<usize> = match split {
        Some(s) => s.test_idx.clone(),
        None => (0..data.len()).collect(),
    };
    let comps = loss_component_export(&model, data, &idx, samples, seed, Execution::Parallel)?;
    if let Some(dir) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_components_csv(fs::File::create(out_csv)?, &comps)?;
    Ok(comps.len() * samples)
}
