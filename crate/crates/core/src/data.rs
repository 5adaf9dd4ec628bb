//! Dataset ingestion, standardization, cross-validation folds, shift splits
//! along the first principal component or the label, and synthetic data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmlError};

/// Number of chunks a directional split cuts the ordered data into.
pub const DEFAULT_CHUNK_COUNT: usize = 10;
/// Held-out chunk for headline interpolation runs.
pub const DEFAULT_INTERP_CHUNK: usize = 5;
/// Held-out chunk for headline extrapolation runs.
pub const DEFAULT_EXTRAP_CHUNK: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
    VeryLarge,
}

/// Regression dataset with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    pub size_class: SizeClass,
}

impl Dataset {
    /// Builds a dataset from row-major features; requires N ≥ 10 and finite values.
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>, d: usize) -> Result<Self> {
        let name = name.into();
        if d == 0 || x.len() != y.len() * d {
            return Err(SmlError::arg(format!(
                "feature buffer of length {} does not hold {} rows of dimension {d}",
                x.len(),
                y.len()
            )));
        }
        if y.len() < 10 {
            return Err(SmlError::arg(format!("dataset {name} has {} rows, need at least 10", y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(SmlError::arg(format!("dataset {name} contains non-finite values")));
        }
        let size_class = known_dataset(&name)
            .map(|k| k.size_class)
            .unwrap_or_else(|| size_class_for(y.len()));
        Ok(Dataset {
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
            name,
            x,
            y,
            d,
            size_class,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn target(&self, i: usize) -> f64 {
        self.y[i]
    }
}

/// Size class used for datasets not in the built-in table.
pub fn size_class_for(n: usize) -> SizeClass {
    match n {
        0..=2_000 => SizeClass::Small,
        2_001..=100_000 => SizeClass::Large,
        _ => SizeClass::VeryLarge,
    }
}

/// Column selection rules applied while loading a CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSchema {
    /// Target column by header name; the last column when absent.
    pub target: Option<String>,
    /// Explicit feature columns by name; every remaining column when absent.
    pub features: Option<Vec<String>>,
    /// Columns dropped by header name.
    pub drop_columns: Vec<String>,
    /// Columns dropped by zero-based position.
    pub drop_indices: Vec<usize>,
}

impl DatasetSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
struct KnownDataset {
    feature_count: usize,
    size_class: SizeClass,
    drop_indices: &'static [usize],
}

fn known_dataset(name: &str) -> Option<KnownDataset> {
    use SizeClass::*;
    let (feature_count, size_class, drop_indices): (usize, SizeClass, &'static [usize]) = match name {
        "yacht" => (6, Small, &[]),
        "diabetes" => (7, Small, &[]),
        "boston" => (13, Small, &[]),
        // X1..X8, Y1 heating load, Y2 cooling load: keep cooling.
        "energy" => (8, Small, &[8]),
        "concrete" => (8, Small, &[]),
        "wine-red" => (11, Small, &[]),
        // Sex is the first (categorical) column.
        "abalone" => (7, Large, &[0]),
        "power" => (4, Large, &[]),
        // 16 features, compressor decay, turbine decay: keep turbine.
        "naval" => (16, Large, &[16]),
        "california" => (8, Large, &[]),
        "superconduct" => (81, Large, &[]),
        "protein" => (9, Large, &[]),
        "year" => (90, VeryLarge, &[]),
        _ => return None,
    };
    Some(KnownDataset {
        feature_count,
        size_class,
        drop_indices,
    })
}

/// Built-in schema for the benchmark datasets; `None` for unknown names.
pub fn builtin_schema(name: &str) -> Option<DatasetSchema> {
    known_dataset(name).map(|k| DatasetSchema {
        drop_indices: k.drop_indices.to_vec(),
        ..DatasetSchema::default()
    })
}

/// Expected feature count for the benchmark datasets.
pub fn expected_feature_count(name: &str) -> Option<usize> {
    known_dataset(name).map(|k| k.feature_count)
}

/// Loads a comma-separated file with a header row.
///
/// Known benchmark names get their built-in column rules unless `schema` is
/// given; unknown names use the last column as target.
pub fn load_dataset(path: &Path, name: &str, schema: Option<&DatasetSchema>) -> Result<Dataset> {
    let builtin = builtin_schema(name);
    let schema = schema.or(builtin.as_ref()).cloned().unwrap_or_default();
    let ingest = |row: usize, column: &str, detail: String| SmlError::Ingestion {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        detail,
    };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 {
        return Err(ingest(1, "*", "need at least one feature and one target column".into()));
    }
    let index_of = |col: &str| {
        headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| ingest(1, col, "column not found in header".into()))
    };
    let target_idx = match &schema.target {
        Some(t) => index_of(t)?,
        None => headers.len() - 1,
    };
    let mut dropped: Vec<usize> = schema.drop_indices.clone();
    for c in &schema.drop_columns {
        dropped.push(index_of(c)?);
    }
    if let Some(&bad) = dropped.iter().find(|&&i| i >= headers.len()) {
        return Err(ingest(1, &bad.to_string(), "drop index beyond header width".into()));
    }
    let feature_idx: Vec<usize> = match &schema.features {
        Some(f) => f.iter().map(|c| index_of(c)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| *i != target_idx && !dropped.contains(i))
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(ingest(1, "*", "no feature columns left after applying the schema".into()));
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let rec = rec.map_err(|e| ingest(line, "*", e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(ingest(line, "*", format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let parse = |i: usize| -> Result<f64> {
            let cell = rec[i].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| ingest(line, &headers[i], format!("non-numeric value {cell:?}")))?;
            if !v.is_finite() {
                return Err(ingest(line, &headers[i], format!("non-finite value {cell:?}")));
            }
            Ok(v)
        };
        for &j in &feature_idx {
            x.push(parse(j)?);
        }
        y.push(parse(target_idx)?);
    }
    if let Some(expected) = expected_feature_count(name) {
        if expected != feature_idx.len() {
            return Err(ingest(
                1,
                "*",
                format!("{name} should have {expected} features after preprocessing, found {}", feature_idx.len()),
            ));
        }
    }
    let mut ds = Dataset::new(name, x, y, feature_idx.len())?;
    ds.feature_names = feature_idx.iter().map(|&i| headers[i].clone()).collect();
    Ok(ds)
}

/// Per-column affine standardization fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Columns (input indices, or `d` for the target) whose variance was zero.
    pub zero_variance: Vec<usize>,
}

fn mean_std_population(vals: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl Standardizer {
    /// Identity transform for `d` inputs.
    pub fn identity(d: usize) -> Self {
        Standardizer {
            x_mean: vec![0.0; d],
            x_std: vec![1.0; d],
            y_mean: 0.0,
            y_std: 1.0,
            zero_variance: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn apply_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn invert_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    /// Maps a standard deviation from standardized to original target units.
    pub fn invert_sigma(&self, s: f64) -> f64 {
        s * self.y_std
    }

    pub fn apply_sigma(&self, s: f64) -> f64 {
        s / self.y_std
    }
}

/// Fits means and population standard deviations on the rows in `idx`.
/// Zero-variance columns get std 1 and are listed in `zero_variance`.
pub fn fit_standardizer(data: &Dataset, idx: &[usize]) -> Result<Standardizer> {
    if idx.is_empty() {
        return Err(SmlError::arg("cannot fit a standardizer on an empty index set"));
    }
    let d = data.dim();
    let n = idx.len();
    let mut zero_variance = Vec::new();
    let mut x_mean = Vec::with_capacity(d);
    let mut x_std = Vec::with_capacity(d);
    for j in 0..d {
        let (m, mut s) = mean_std_population(idx.iter().map(|&i| data.row(i)[j]), n);
        if !(s > 0.0) {
            log::warn!("{}: feature {j} has zero variance on the fit rows", data.name);
            zero_variance.push(j);
            s = 1.0;
        }
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, mut y_std) = mean_std_population(idx.iter().map(|&i| data.target(i)), n);
    if !(y_std > 0.0) {
        log::warn!("{}: target has zero variance on the fit rows", data.name);
        zero_variance.push(d);
        y_std = 1.0;
    }
    Ok(Standardizer {
        x_mean,
        x_std,
        y_mean,
        y_std,
        zero_variance,
    })
}

/// Which rows a split evaluates on and how it was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "iid_train")]
    IidTrain,
    #[serde(rename = "iid_test")]
    IidTest,
    #[serde(rename = "pca_interp")]
    PcaInterp,
    #[serde(rename = "pca_extrap")]
    PcaExtrap,
    #[serde(rename = "label_interp")]
    LabelInterp,
    #[serde(rename = "label_extrap")]
    LabelExtrap,
}

impl SplitKind {
    pub const ALL: [SplitKind; 6] = [
        SplitKind::IidTrain,
        SplitKind::IidTest,
        SplitKind::PcaInterp,
        SplitKind::PcaExtrap,
        SplitKind::LabelInterp,
        SplitKind::LabelExtrap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::IidTrain => "iid_train",
            SplitKind::IidTest => "iid_test",
            SplitKind::PcaInterp => "pca_interp",
            SplitKind::PcaExtrap => "pca_extrap",
            SplitKind::LabelInterp => "label_interp",
            SplitKind::LabelExtrap => "label_extrap",
        }
    }

    pub fn is_iid(self) -> bool {
        matches!(self, SplitKind::IidTrain | SplitKind::IidTest)
    }

    pub fn direction(self) -> Option<SplitDirection> {
        match self {
            SplitKind::PcaInterp | SplitKind::PcaExtrap => Some(SplitDirection::Pca),
            SplitKind::LabelInterp | SplitKind::LabelExtrap => Some(SplitDirection::Label),
            _ => None,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = SmlError;

    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SmlError::arg(format!("unknown split kind {s:?}")))
    }
}

/// Ordering used by a directional split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitDirection {
    /// Projection onto the first principal component of the inputs.
    Pca,
    /// The raw target value.
    Label,
}

/// Disjoint train/test index sets. Serializes as the split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub fold: usize,
    pub chunk_count: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl DatasetSplit {
    /// Indices the split's metrics are computed on.
    pub fn eval_idx(&self) -> &[usize] {
        match self.kind {
            SplitKind::IidTrain => &self.train_idx,
            _ => &self.test_idx,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Shuffled k-fold partition; fold `f` holds out the `f`-th near-equal slice.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if k < 2 {
        return Err(SmlError::arg(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(SmlError::arg(format!("k-fold with k = {k} exceeds {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let mut test_idx = order[lo..hi].to_vec();
            let mut train_idx: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            DatasetSplit {
                kind: SplitKind::IidTest,
                fold: f,
                chunk_count: k,
                train_idx,
                test_idx,
            }
        })
        .collect())
}

/// Convergence tolerance on the eigen-residual of the power iteration.
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Covariance matrix (population) of row-major `x` with `d` columns.
pub fn covariance(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut c = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for ((ci, v), m) in c.iter_mut().zip(row).zip(&mean) {
            *ci = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

fn matvec(a: &[f64], v: &[f64]) -> Vec<f64> {
    a.chunks_exact(v.len())
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading principal direction of row-major `x` (N × d) by power iteration.
///
/// Iterates `v ← Cv/‖Cv‖` on the covariance until the eigen-residual
/// `‖Cv − λv‖` falls below [`PCA_TOLERANCE`] (relative to λ), then fixes the
/// sign so the largest-magnitude entry is positive.
pub fn pca_first_component(x: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || x.len() % d != 0 {
        return Err(SmlError::arg("feature buffer is not a whole number of rows"));
    }
    if x.len() / d < 2 {
        return Err(SmlError::arg("PCA needs at least two rows"));
    }
    let cov = covariance(x, d);
    // Start from a fixed non-symmetric vector so no axis-aligned or
    // all-ones eigenvector is orthogonal to it.
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j as f64 + 1.0) * 0.618_033_988_75).fract()).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let scale = cov.iter().map(|c| c.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        // Zero covariance: every direction is an eigenvector.
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        return Ok(e);
    }
    let mut converged = false;
    for _ in 0..PCA_MAX_ITERATIONS {
        let cv = matvec(&cov, &v);
        let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let resid = norm(&cv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        if resid <= PCA_TOLERANCE * lambda.abs().max(scale) {
            converged = true;
            break;
        }
        let n = norm(&cv);
        if n == 0.0 {
            return Err(SmlError::Numerical("power iteration collapsed to the zero vector".into()));
        }
        v = cv.into_iter().map(|x| x / n).collect();
    }
    if !converged {
        return Err(SmlError::Numerical(format!(
            "power iteration did not converge within {PCA_MAX_ITERATIONS} iterations"
        )));
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let lead = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

/// Projections of every row onto `direction`.
pub fn project(data: &Dataset, direction: &[f64]) -> Vec<f64> {
    (0..data.len())
        .map(|i| data.row(i).iter().zip(direction).map(|(a, b)| a * b).sum())
        .collect()
}

/// Orders rows by `scores` (ties by row index), cuts them into `chunk_count`
/// near-equal contiguous chunks and holds out chunk `held_chunk` as test set.
pub fn directional_split(
    scores: &[f64],
    direction: SplitDirection,
    chunk_count: usize,
    held_chunk: usize,
) -> Result<DatasetSplit> {
    if chunk_count < 3 {
        return Err(SmlError::arg(format!("directional split needs >= 3 chunks, got {chunk_count}")));
    }
    if held_chunk >= chunk_count {
        return Err(SmlError::arg(format!("held chunk {held_chunk} out of range 0..{chunk_count}")));
    }
    let n = scores.len();
    if n < chunk_count {
        return Err(SmlError::arg(format!("{n} rows cannot fill {chunk_count} chunks")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let (lo, hi) = (held_chunk * n / chunk_count, (held_chunk + 1) * n / chunk_count);
    let extrap = held_chunk == 0 || held_chunk == chunk_count - 1;
    let kind = match (direction, extrap) {
        (SplitDirection::Pca, false) => SplitKind::PcaInterp,
        (SplitDirection::Pca, true) => SplitKind::PcaExtrap,
        (SplitDirection::Label, false) => SplitKind::LabelInterp,
        (SplitDirection::Label, true) => SplitKind::LabelExtrap,
    };
    let test_idx = order[lo..hi].to_vec();
    let mut train_idx: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
    train_idx.sort_unstable();
    Ok(DatasetSplit {
        kind,
        fold: held_chunk,
        chunk_count,
        train_idx,
        test_idx,
    })
}

/// Scores for a directional split: projections of the standardized features
/// onto their first principal component, or raw labels.
pub fn direction_scores(data: &Dataset, direction: SplitDirection) -> Result<Vec<f64>> {
    match direction {
        SplitDirection::Label => Ok(data.targets().to_vec()),
        SplitDirection::Pca => {
            // Components of raw features would follow whichever column has the largest units.
            let all: Vec<usize> = (0..data.len()).collect();
            let st = fit_standardizer(data, &all)?;
            let z: Vec<f64> = all.iter().flat_map(|&i| st.apply_x(data.row(i))).collect();
            let v = pca_first_component(&z, data.dim())?;
            Ok(z.chunks(data.dim()).map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect())
        }
    }
}

/// Noise level of [`gen_heteroskedastic_toy`] at input `x`.
pub fn toy_noise_sigma(x: f64) -> f64 {
    0.1 + 0.4 * x.abs() / 3.0
}

/// `x ~ U(−3, 3)`, `y = sin(2x) + σ(x)·ε` with `σ(x) = 0.1 + 0.4|x|/3`, ε ~ N(0, 1).
pub fn gen_heteroskedastic_toy(n: usize, seed: u64) -> Result<Dataset> {
    if n < 100 {
        return Err(SmlError::arg(format!("toy generator needs n >= 100, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.gen_range(-3.0..3.0);
        let eps: f64 = rng.sample(StandardNormal);
        x.push(xi);
        y.push((2.0 * xi).sin() + toy_noise_sigma(xi) * eps);
    }
    Dataset::new("toy", x, y, 1)
}

/// Pairs `(r_i, σ_i)` with `σ_i ~ U(0, 2)` and `r_i ~ N(0, σ_i)`.
pub fn gen_ideal_scatter(n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(SmlError::arg(format!("ideal scatter needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let s: f64 = rng.gen_range(0.0..2.0);
            let z: f64 = rng.sample(StandardNormal);
            (s * z, s)
        })
        .collect())
}

/// Loads a dataset by name: `toy` is generated, anything else read from `path`.
pub fn resolve_dataset(
    name: &str,
    path: Option<&Path>,
    schema: Option<&DatasetSchema>,
    toy_n: usize,
    toy_seed: u64,
) -> Result<Dataset> {
    match (name, path) {
        ("toy", None) => gen_heteroskedastic_toy(toy_n, toy_seed),
        (_, Some(p)) => load_dataset(p, name, schema),
        (_, None) => Err(SmlError::Config(format!("dataset {name:?} needs a CSV path"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy_rows(rows: usize, cols: &[&str], first: &str) -> String {
        let mut s = cols.join(",") + "\n";
        for r in 0..rows {
            let mut cells = vec![if first.is_empty() { format!("{}", r) } else { first.to_string() }];
            for c in 1..cols.len() {
                cells.push(format!("{}", (r * 7 + c * 3) % 11));
            }
            s += &(cells.join(",") + "\n");
        }
        s
    }

    #[test]
    fn plain_csv_uses_last_column_as_target() {
        let f = write_csv(&toy_rows(12, &["x1", "x2", "y"], ""));
        let ds = load_dataset(f.path(), "mytoy", None).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.feature_names, vec!["x1", "x2"]);
        assert_eq!(ds.target(0), 6.0);
    }

    #[test]
    fn abalone_drops_first_feature() {
        let cols = ["sex", "len", "diam", "h", "w1", "w2", "w3", "w4", "rings"];
        let f = write_csv(&toy_rows(15, &cols, "M"));
        let ds = load_dataset(f.path(), "abalone", None).unwrap();
        assert_eq!(ds.dim(), 7);
        assert_eq!(ds.feature_names[0], "len");
        assert_eq!(ds.size_class, SizeClass::Large);
    }

    #[test]
    fn energy_keeps_cooling_load() {
        let cols = ["X1", "X2", "X3", "X4", "X5", "X6", "X7", "X8", "Y1", "Y2"];
        let f = write_csv(&toy_rows(20, &cols, ""));
        let ds = load_dataset(f.path(), "energy", None).unwrap();
        assert_eq!(ds.dim(), 8);
        assert!(!ds.feature_names.contains(&"Y1".to_string()));
        // row 0: Y2 is column 9 -> (0*7 + 9*3) % 11 = 5
        assert_eq!(ds.target(0), 5.0);
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let f = write_csv("a,b,y\n1,2,3\n4,oops,6\n");
        match load_dataset(f.path(), "t", None) {
            Err(SmlError::Ingestion { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_target_column_is_an_error() {
        let f = write_csv(&toy_rows(12, &["a", "b", "c"], ""));
        let schema = DatasetSchema {
            target: Some("zzz".into()),
            ..Default::default()
        };
        assert!(matches!(load_dataset(f.path(), "t", Some(&schema)), Err(SmlError::Ingestion { .. })));
    }

    #[test]
    fn wrong_feature_count_for_known_name_is_rejected() {
        let f = write_csv(&toy_rows(12, &["a", "b", "c"], ""));
        assert!(matches!(load_dataset(f.path(), "power", None), Err(SmlError::Ingestion { .. })));
    }

    #[test]
    fn schema_json_round_trip() {
        let s = DatasetSchema {
            target: Some("Y2".into()),
            drop_columns: vec!["Y1".into()],
            ..Default::default()
        };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DatasetSchema>(&j).unwrap(), s);
        let partial: DatasetSchema = serde_json::from_str(r#"{"target":"q"}"#).unwrap();
        assert_eq!(partial.target.as_deref(), Some("q"));
    }

    fn dataset(rows: &[[f64; 2]], y: &[f64]) -> Dataset {
        Dataset::new("t", rows.iter().flatten().copied().collect(), y.to_vec(), 2).unwrap()
    }

    #[test]
    fn standardizer_hand_values() {
        let mut rows = vec![[1.0, 5.0], [3.0, 5.0]];
        rows.extend(std::iter::repeat([0.0, 0.0]).take(8));
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let ds = dataset(&rows, &y);
        let st = fit_standardizer(&ds, &[0, 1]).unwrap();
        assert_eq!(st.x_mean[0], 2.0);
        assert_eq!(st.x_std[0], 1.0);
        // constant feature on the fit rows
        assert_eq!(st.x_std[1], 1.0);
        assert_eq!(st.zero_variance, vec![1]);
        assert_eq!(st.apply_x(ds.row(0))[1], 0.0);
    }

    #[test]
    fn standardizer_round_trip_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 2]> = (0..200).map(|_| [rng.gen_range(-50.0..80.0), rng.gen_range(0.0..1e-3)]).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.gen_range(100.0..200.0)).collect();
        let ds = dataset(&rows, &y);
        let idx: Vec<usize> = (0..150).collect();
        let st = fit_standardizer(&ds, &idx).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let back = st.invert_x(&st.apply_x(ds.row(i)));
            for (a, b) in back.iter().zip(ds.row(i)) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((st.invert_y(st.apply_y(ds.target(i))) - ds.target(i)).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
        for j in 0..2 {
            let col: Vec<f64> = idx.iter().map(|&i| st.apply_x(ds.row(i))[j]).collect();
            let (m, s) = crate::stats::mean_std(&col);
            assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn kfold_singletons_and_cover() {
        let folds = kfold(10, 10, 3).unwrap();
        assert!(folds.iter().all(|f| f.test_idx.len() == 1 && f.train_idx.len() == 9));
        let folds = kfold(103, 7, 3).unwrap();
        let mut seen = vec![0; 103];
        for f in &folds {
            for &i in &f.test_idx {
                seen[i] += 1;
            }
            assert!(f.test_idx.len() == 14 || f.test_idx.len() == 15);
            assert!(f.train_idx.iter().all(|i| !f.test_idx.contains(i)));
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, kfold(103, 7, 3).unwrap());
        assert_ne!(folds, kfold(103, 7, 4).unwrap());
        assert!(kfold(5, 6, 0).is_err());
        assert!(kfold(5, 1, 0).is_err());
    }

    #[test]
    fn pca_on_diagonal_line() {
        let x: Vec<f64> = (0..20).flat_map(|t| [t as f64 * 0.3 - 2.0, t as f64 * 0.3 - 2.0]).collect();
        let v = pca_first_component(&x, 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0] - h).abs() < 1e-9 && (v[1] - h).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn pca_zero_column_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..100)
            .flat_map(|_| [rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-3.0..3.0)])
            .collect();
        let v = pca_first_component(&x, 3).unwrap();
        assert!(v[1].abs() < 1e-12);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_isotropic_cloud_is_an_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v = pca_first_component(&x, 2).unwrap();
        let c = covariance(&x, 2);
        let cv = matvec(&c, &v);
        let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let r = norm(&cv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        assert!((norm(&v) - 1.0).abs() < 1e-12);
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn directional_split_examples() {
        let scores: Vec<f64> = vec![5.0, 1.0, 9.0, 3.0, 7.0, 0.0, 8.0, 2.0, 6.0, 4.0];
        let s = directional_split(&scores, SplitDirection::Pca, 10, 0).unwrap();
        assert_eq!((s.kind, s.test_idx.clone()), (SplitKind::PcaExtrap, vec![5]));
        let s = directional_split(&scores, SplitDirection::Label, 10, 5).unwrap();
        // 6th ranked point has score 5.0 at index 0
        assert_eq!((s.kind, s.test_idx.clone()), (SplitKind::LabelInterp, vec![0]));
        assert_eq!(s.train_idx.len(), 9);
        let flat = vec![1.0; 10];
        let s = directional_split(&flat, SplitDirection::Pca, 10, 3).unwrap();
        assert_eq!(s.test_idx, vec![3]);
        assert!(directional_split(&flat, SplitDirection::Pca, 2, 0).is_err());
        assert!(directional_split(&flat, SplitDirection::Pca, 10, 10).is_err());
    }

    #[test]
    fn split_manifest_json() {
        let s = kfold(20, 4, 1).unwrap().remove(2);
        assert_eq!(DatasetSplit::from_json(&s.to_json().unwrap()).unwrap(), s);
        assert!(s.to_json().unwrap().contains("\"iid_test\""));
    }

    #[test]
    fn toy_generator_properties() {
        assert_eq!(toy_noise_sigma(0.0), 0.1);
        assert!((toy_noise_sigma(3.0) - 0.5).abs() < 1e-15);
        assert!((toy_noise_sigma(-3.0) - 0.5).abs() < 1e-15);
        let a = gen_heteroskedastic_toy(10_000, 5).unwrap();
        assert_eq!(a, gen_heteroskedastic_toy(10_000, 5).unwrap());
        assert!(gen_heteroskedastic_toy(99, 5).is_err());
        // binned residual std near x = 0
        let resid: Vec<f64> = (0..a.len())
            .filter(|&i| a.row(i)[0].abs() < 0.15)
            .map(|i| a.target(i) - (2.0 * a.row(i)[0]).sin())
            .collect();
        let (_, s) = crate::stats::mean_std(&resid);
        assert!(resid.len() > 300);
        assert!((s - 0.1).abs() < 0.02, "{s}");
    }

    #[test]
    fn ideal_scatter_sigma_range() {
        let p = gen_ideal_scatter(3000, 1).unwrap();
        assert_eq!(p.len(), 3000);
        assert!(p.iter().all(|&(_, s)| (0.0..=2.0).contains(&s)));
        assert!(gen_ideal_scatter(1, 1).is_err());
    }

    #[test]
    fn split_kind_parses() {
        for k in SplitKind::ALL {
            assert_eq!(k.as_str().parse::<SplitKind>().unwrap(), k);
        }
        assert!("nope".parse::<SplitKind>().is_err());
    }
}
