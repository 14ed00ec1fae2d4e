//! Local data of a client node.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use fedplat_core::model::data::{
    load_csv_dataset, load_csv_raw, stratified_holdout, synth_dataset, Dataset, PreprocessSpec, Preprocessor,
};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct LocalData {
    pub train: Option<Arc<Dataset>>,
    pub eval: Option<Arc<Dataset>>,
}

impl LocalData {
    pub fn new(train: Option<Dataset>, eval: Option<Dataset>) -> Self {
        Self {
            train: train.map(Arc::new),
            eval: eval.map(Arc::new),
        }
    }
}

/// Called once at startup and again for every job.
pub trait DataLoader: Send + Sync {
    fn load(&self) -> Result<LocalData>;
}

/// Data already in memory.
pub struct StaticData(pub LocalData);

impl DataLoader for StaticData {
    fn load(&self) -> Result<LocalData> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        /// Column layout; the stroke CSV layout when absent.
        #[serde(default)]
        preprocess: Option<PreprocessSpec>,
    },
    Synthetic {
        seed: u64,
        n_samples: usize,
        prevalence: f64,
        n_features: usize,
    },
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLoaderSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Stratified share of the local data held out for evaluation
    /// (participants only; observers evaluate on everything).
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl DataLoaderSpec {
    pub fn resolve(&self, observer: bool) -> Result<LocalData> {
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Loader(format!(
                "eval_fraction must be in [0, 1), got {}",
                self.eval_fraction
            )));
        }
        match &self.source {
            DataSource::Csv { path, preprocess } => {
                let spec = preprocess.clone().unwrap_or_else(PreprocessSpec::stroke);
                if observer {
                    let ds = load_csv_dataset(path, &spec)?;
                    return Ok(LocalData::new(None, Some(ds)));
                }
                let raw = load_csv_raw(path, &spec)?;
                let numeric = spec.numeric_feature_indices();
                holdout(&raw, self.eval_fraction, self.split_seed, Some((&numeric, spec.standardize)))
            }
            DataSource::Synthetic {
                seed,
                n_samples,
                prevalence,
                n_features,
            } => {
                let ds = synth_dataset(*seed, *n_samples, *prevalence, *n_features)?;
                if observer {
                    return Ok(LocalData::new(None, Some(ds)));
                }
                holdout(&ds, self.eval_fraction, self.split_seed, None)
            }
        }
    }
}

/// Stratified train/eval split of raw local data. With `preprocess`
/// (numeric column indices, standardize), imputation and scaling are fitted
/// on the training part only and applied to both parts.
pub fn holdout(
    raw: &Dataset,
    eval_fraction: f64,
    seed: u64,
    preprocess: Option<(&[usize], bool)>,
) -> Result<LocalData> {
    let (train_idx, eval_idx) = stratified_holdout(raw, eval_fraction, seed);
    let mut train = raw.subset(&train_idx);
    let mut eval = raw.subset(&eval_idx);
    if let Some((numeric, standardize)) = preprocess {
        let pre = Preprocessor::fit(&train, numeric, standardize)?;
        pre.apply(&mut train);
        pre.apply(&mut eval);
    }
    let eval = if eval.is_empty() { None } else { Some(eval) };
    Ok(LocalData::new(Some(train), eval))
}

/// Resolves a [`DataLoaderSpec`] once and serves the cached result.
pub struct SpecLoader {
    spec: DataLoaderSpec,
    observer: bool,
    cache: OnceLock<LocalData>,
}

impl SpecLoader {
    pub fn new(spec: DataLoaderSpec, observer: bool) -> Self {
        Self {
            spec,
            observer,
            cache: OnceLock::new(),
        }
    }
}

impl DataLoader for SpecLoader {
    fn load(&self) -> Result<LocalData> {
        if let Some(d) = self.cache.get() {
            return Ok(d.clone());
        }
        let d = self.spec.resolve(self.observer)?;
        Ok(self.cache.get_or_init(|| d).clone())
    }
}
