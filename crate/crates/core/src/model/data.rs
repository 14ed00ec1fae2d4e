//! Tabular datasets: CSV ingestion with one-hot encoding, median imputation and
//! z-scoring, a synthetic two-Gaussian fallback, and stratified splitting.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub n_positive: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, feature_names: Vec<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not 0/1")));
        }
        let n_positive = labels.iter().filter(|&&y| y == 1).count();
        Ok(Self {
            features,
            labels,
            feature_names,
            n_positive,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn prevalence(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n_positive as f64 / self.len() as f64
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let labels: Vec<u8> = indices.iter().map(|&i| self.labels[i]).collect();
        let n_positive = labels.iter().filter(|&&y| y == 1).count();
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels,
            feature_names: self.feature_names.clone(),
            n_positive,
        }
    }

    /// Row-wise concatenation; all parts must share feature names.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.feature_names != first.feature_names) {
            return Err(Error::Data("feature names differ between parts".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Dataset::new(features, labels, first.feature_names.clone())
    }

    pub fn has_missing(&self) -> bool {
        self.features.iter().any(|v| v.is_nan())
    }
}

// ---------------------------------------------------------------------------
// synthetic data

/// Two isotropic Gaussians with unit variance whose means are `separation`
/// standard deviations apart (along the all-ones direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub prevalence: f64,
    pub n_features: usize,
    pub separation: f64,
}

/// Separation used by [`synth_dataset`].
pub const DEFAULT_SEPARATION: f64 = 1.5;

pub fn synth_dataset(seed: u64, n_samples: usize, prevalence: f64, n_features: usize) -> Result<Dataset> {
    synth_dataset_with(&SynthSpec {
        seed,
        n_samples,
        prevalence,
        n_features,
        separation: DEFAULT_SEPARATION,
    })
}

pub fn synth_dataset_with(spec: &SynthSpec) -> Result<Dataset> {
    if !(spec.prevalence > 0.0 && spec.prevalence <= 0.5) {
        return Err(Error::Data(format!(
            "prevalence must be in (0, 0.5], got {}",
            spec.prevalence
        )));
    }
    if spec.n_features == 0 {
        return Err(Error::Data("n_features must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = (spec.prevalence * spec.n_samples as f64).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n_samples).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let shift = spec.separation / (spec.n_features as f64).sqrt();
    let mut features = Array2::zeros((spec.n_samples, spec.n_features));
    for (mut row, &y) in features.rows_mut().into_iter().zip(&labels) {
        for v in row.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = noise + if y == 1 { shift } else { 0.0 };
        }
    }
    let names = (0..spec.n_features).map(|i| format!("x{i}")).collect();
    Dataset::new(features, labels, names)
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    /// One-hot encoded over a level list frozen when the spec is written.
    Categorical { levels: Vec<String> },
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub column: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

fn default_missing() -> Vec<String> {
    vec!["N/A".to_string(), String::new()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub columns: Vec<ColumnSpec>,
    pub label: LabelSpec,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
    /// z-score numeric columns using statistics of the loaded file.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl PreprocessSpec {
    /// Feature names after one-hot expansion, in column order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for col in &self.columns {
            match &col.kind {
                ColumnKind::Numeric => out.push(col.name.clone()),
                ColumnKind::Categorical { levels } => {
                    out.extend(levels.iter().map(|l| format!("{}={}", col.name, l)))
                }
                ColumnKind::Ignore => {}
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.feature_names().len()
    }

    /// Feature indices holding numeric (not one-hot) values.
    pub fn numeric_feature_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut idx = 0;
        for col in &self.columns {
            match &col.kind {
                ColumnKind::Numeric => {
                    out.push(idx);
                    idx += 1;
                }
                ColumnKind::Categorical { levels } => idx += levels.len(),
                ColumnKind::Ignore => {}
            }
        }
        out
    }

    /// Layout of the public stroke prediction CSV.
    ///
    /// Five numeric columns plus one-hot gender (3), ever_married (2),
    /// work_type (5), Residence_type (2) and smoking_status (4): width 21.
    pub fn stroke() -> Self {
        fn cat(name: &str, levels: &[&str]) -> ColumnSpec {
            ColumnSpec {
                name: name.into(),
                kind: ColumnKind::Categorical {
                    levels: levels.iter().map(|s| s.to_string()).collect(),
                },
            }
        }
        fn num(name: &str) -> ColumnSpec {
            ColumnSpec {
                name: name.into(),
                kind: ColumnKind::Numeric,
            }
        }
        PreprocessSpec {
            columns: vec![
                ColumnSpec {
                    name: "id".into(),
                    kind: ColumnKind::Ignore,
                },
                cat("gender", &["Male", "Female", "Other"]),
                num("age"),
                num("hypertension"),
                num("heart_disease"),
                cat("ever_married", &["Yes", "No"]),
                cat(
                    "work_type",
                    &["children", "Govt_job", "Never_worked", "Private", "Self-employed"],
                ),
                cat("Residence_type", &["Urban", "Rural"]),
                num("avg_glucose_level"),
                num("bmi"),
                cat(
                    "smoking_status",
                    &["formerly smoked", "never smoked", "smokes", "Unknown"],
                ),
            ],
            label: LabelSpec {
                column: "stroke".into(),
                positive: vec!["1".into()],
                negative: vec!["0".into()],
            },
            missing_tokens: default_missing(),
            standardize: true,
        }
    }
}

/// Parses and one-hot encodes a CSV without imputation or scaling; missing
/// numeric cells become NaN.
pub fn load_csv_raw(path: &Path, spec: &PreprocessSpec) -> Result<Dataset> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{display}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{display}: {e}")))?
        .clone();

    let by_name: HashMap<&str, &ColumnSpec> =
        spec.columns.iter().map(|c| (c.name.as_str(), c)).collect();
    for h in headers.iter() {
        if h != spec.label.column && !by_name.contains_key(h) {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: format!("unknown column {h:?}"),
            });
        }
    }
    let position = |name: &str| headers.iter().position(|h| h == name);
    let label_pos = position(&spec.label.column).ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        message: format!("missing label column {:?}", spec.label.column),
    })?;
    let mut col_pos = Vec::with_capacity(spec.columns.len());
    for col in &spec.columns {
        col_pos.push(position(&col.name).ok_or_else(|| Error::Parse {
            path: display.clone(),
            line: 1,
            message: format!("missing declared column {:?}", col.name),
        })?);
    }

    let width = spec.width();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| Error::Parse {
            path: display.clone(),
            line,
            message,
        };
        let raw_label = record.get(label_pos).unwrap_or("").trim();
        let label = if spec.label.positive.iter().any(|v| v == raw_label) {
            1
        } else if spec.label.negative.iter().any(|v| v == raw_label) {
            0
        } else {
            return Err(err(format!("unmapped label value {raw_label:?}")));
        };
        let start = values.len();
        for (col, &pos) in spec.columns.iter().zip(&col_pos) {
            let cell = record.get(pos).unwrap_or("").trim();
            match &col.kind {
                ColumnKind::Ignore => {}
                ColumnKind::Numeric => {
                    if spec.missing_tokens.iter().any(|t| t == cell) {
                        values.push(f64::NAN);
                    } else {
                        let v: f64 = cell
                            .parse()
                            .map_err(|_| err(format!("column {}: cannot parse {cell:?}", col.name)))?;
                        values.push(v);
                    }
                }
                ColumnKind::Categorical { levels } => {
                    let hit = levels
                        .iter()
                        .position(|l| l == cell)
                        .ok_or_else(|| err(format!("column {}: unknown level {cell:?}", col.name)))?;
                    values.extend((0..levels.len()).map(|i| if i == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        debug_assert_eq!(values.len() - start, width);
        labels.push(label);
    }
    let features = Array2::from_shape_vec((labels.len(), width), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    Dataset::new(features, labels, spec.feature_names())
}

/// Parses, imputes missing numeric cells with the column median and, when
/// `spec.standardize` is set, z-scores numeric columns with this file's statistics.
pub fn load_csv_dataset(path: &Path, spec: &PreprocessSpec) -> Result<Dataset> {
    let mut ds = load_csv_raw(path, spec)?;
    let pre = Preprocessor::fit(&ds, &spec.numeric_feature_indices(), spec.standardize)?;
    pre.apply(&mut ds);
    Ok(ds)
}

/// Imputation and scaling statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub columns: Vec<usize>,
    pub medians: Vec<f64>,
    pub means: Vec<f64>,
    /// Standard deviations with zero replaced by one.
    pub scales: Vec<f64>,
    pub standardize: bool,
}

impl Preprocessor {
    pub fn fit(ds: &Dataset, numeric: &[usize], standardize: bool) -> Result<Self> {
        let mut medians = Vec::with_capacity(numeric.len());
        let mut means = Vec::with_capacity(numeric.len());
        let mut scales = Vec::with_capacity(numeric.len());
        for &c in numeric {
            let col = ds.features.column(c);
            let mut observed: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
            if observed.is_empty() {
                return Err(Error::Data(format!(
                    "column {} has no observed values",
                    ds.feature_names[c]
                )));
            }
            observed.sort_by(f64::total_cmp);
            let m = observed.len();
            let median = if m % 2 == 1 {
                observed[m / 2]
            } else {
                0.5 * (observed[m / 2 - 1] + observed[m / 2])
            };
            let imputed: Vec<f64> = col.iter().map(|&v| if v.is_nan() { median } else { v }).collect();
            let mean = imputed.iter().sum::<f64>() / imputed.len() as f64;
            let var = imputed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / imputed.len() as f64;
            let sd = var.sqrt();
            medians.push(median);
            means.push(mean);
            scales.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Self {
            columns: numeric.to_vec(),
            medians,
            means,
            scales,
            standardize,
        })
    }

    pub fn apply(&self, ds: &mut Dataset) {
        for (k, &c) in self.columns.iter().enumerate() {
            for v in ds.features.column_mut(c).iter_mut() {
                if v.is_nan() {
                    *v = self.medians[k];
                }
                if self.standardize {
                    *v = (*v - self.means[k]) / self.scales[k];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// splitting

/// Deals indices of each class (shuffled) round-robin into `k` groups,
/// positives first, so group sizes differ by at most one and each group keeps
/// the class ratio.
fn deal(indices: &[usize], labels: &[u8], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pos: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut groups = vec![Vec::new(); k];
    for (slot, i) in pos.into_iter().chain(neg).enumerate() {
        groups[slot % k].push(i);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Must equal `1 / k_folds`: each fold's test set is one stratified fold.
    pub test_fraction: f64,
    pub k_folds: usize,
    pub n_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub test: Vec<usize>,
    /// Training indices of the fold, dealt across clients.
    pub shards: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn materialize(&self, ds: &Dataset) -> (Vec<Dataset>, Dataset) {
        let shards = self.shards.iter().map(|s| ds.subset(s)).collect();
        (shards, ds.subset(&self.test))
    }

    pub fn train_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.shards.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    /// Fold index of every sample.
    pub fold_of: Vec<usize>,
    pub folds: Vec<FoldSplit>,
}

/// Stratified k-fold cross-validation whose training part is further dealt
/// across `n_clients` shards of near-equal size.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<CrossValidation> {
    if spec.n_clients < 1 {
        return Err(Error::Data("n_clients must be >= 1".into()));
    }
    if spec.k_folds < 2 {
        return Err(Error::Data("k_folds must be >= 2".into()));
    }
    if (spec.test_fraction - 1.0 / spec.k_folds as f64).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "test_fraction {} is incompatible with {} folds",
            spec.test_fraction, spec.k_folds
        )));
    }
    if ds.n_positive < spec.k_folds {
        return Err(Error::Data(format!(
            "{} positives cannot be stratified into {} folds",
            ds.n_positive, spec.k_folds
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let groups = deal(&all, &ds.labels, spec.k_folds, &mut rng);
    let mut fold_of = vec![0; ds.len()];
    for (f, g) in groups.iter().enumerate() {
        for &i in g {
            fold_of[i] = f;
        }
    }
    let mut folds = Vec::with_capacity(spec.k_folds);
    for (f, test) in groups.iter().enumerate() {
        let train: Vec<usize> = all.iter().copied().filter(|&i| fold_of[i] != f).collect();
        let shards = deal(&train, &ds.labels, spec.n_clients, &mut rng);
        folds.push(FoldSplit {
            fold: f,
            test: test.clone(),
            shards,
        });
    }
    Ok(CrossValidation { fold_of, folds })
}

/// Deals `indices` into `n` stratified shards of near-equal size.
pub fn stratified_shards(ds: &Dataset, indices: &[usize], n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    deal(indices, &ds.labels, n.max(1), &mut rng)
}

/// Stratified holdout: returns `(train, holdout)` index lists.
pub fn stratified_holdout(ds: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_pos = (pos.len() as f64 * fraction).round() as usize;
    let n_neg = (neg.len() as f64 * fraction).round() as usize;
    let mut holdout: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    let mut train: Vec<usize> = pos[n_pos..].iter().chain(&neg[n_neg..]).copied().collect();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}
