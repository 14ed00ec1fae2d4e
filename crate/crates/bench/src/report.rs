//! Results table and its CSV, JSON and Markdown renderings.

use std::path::{Path, PathBuf};

use fedplat_core::model::metrics::EvalMetrics;
use serde::{Deserialize, Serialize};

use crate::Result;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Test-set metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub fold: usize,
    /// Client index for local runs.
    pub client: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    pub loss: f64,
    pub threshold: f64,
    /// Epochs or rounds actually run.
    pub epochs: usize,
    pub stopped_early: bool,
    pub source_epoch: u64,
}

impl RunResult {
    pub fn new(method: &str, fold: usize, client: Option<usize>, m: &EvalMetrics) -> Self {
        Self {
            method: method.to_string(),
            fold,
            client,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auprc: m.auprc,
            loss: m.loss,
            threshold: m.threshold_used,
            epochs: 0,
            stopped_early: false,
            source_epoch: 0,
        }
    }
}

/// One method: statistics over folds. Runs of the same fold (the clients of
/// the local scenario) are averaged first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub n_runs: usize,
    pub n_folds: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub auprc: Stat,
}

impl Row {
    pub fn from_runs(method: &str, runs: &[RunResult]) -> Self {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.method == method).collect();
        let mut folds: Vec<usize> = mine.iter().map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        let per_fold = |f: &dyn Fn(&RunResult) -> f64| -> Vec<f64> {
            folds
                .iter()
                .map(|fold| {
                    let vals: Vec<f64> = mine.iter().filter(|r| r.fold == *fold).map(|r| f(r)).collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .collect()
        };
        Self {
            method: method.to_string(),
            n_runs: mine.len(),
            n_folds: folds.len(),
            precision: Stat::of(&per_fold(&|r| r.precision)),
            recall: Stat::of(&per_fold(&|r| r.recall)),
            f1: Stat::of(&per_fold(&|r| r.f1)),
            auprc: Stat::of(&per_fold(&|r| r.auprc)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub banner: String,
    pub synthetic: bool,
    pub seed: u64,
    pub folds: usize,
    pub n_clients: usize,
    pub rows: Vec<Row>,
    pub runs: Vec<RunResult>,
    /// Free-form run metadata (preset, budgets, audits, timings).
    pub meta: serde_json::Value,
}

impl ResultsTable {
    pub fn row(&self, method: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("> {}\n\n", self.banner));
        s.push_str(&format!(
            "{} folds, {} clients, seed {}. Values in percent, mean ± std over folds.\n\n",
            self.folds, self.n_clients, self.seed
        ));
        s.push_str("| Method | Precision | Recall | F1 Score | AUPRC | Runs |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.method,
                r.precision.percent(),
                r.recall.percent(),
                r.f1.percent(),
                r.auprc.percent(),
                r.n_runs
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "n_runs",
            "precision_mean",
            "precision_std",
            "recall_mean",
            "recall_std",
            "f1_mean",
            "f1_std",
            "auprc_mean",
            "auprc_std",
        ])?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.n_runs.to_string()];
            for s in [r.precision, r.recall, r.f1, r.auprc] {
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `results.csv`, `results.json` and `results.md` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join("results.csv");
        let json = dir.join("results.json");
        let md = dir.join("results.md");
        self.write_csv(&csv)?;
        std::fs::write(&json, serde_json::to_string_pretty(self)?)?;
        std::fs::write(&md, self.to_markdown())?;
        Ok(vec![csv, json, md])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(method: &str, fold: usize, auprc: f64) -> RunResult {
        RunResult {
            method: method.into(),
            fold,
            client: None,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            auprc,
            loss: 0.0,
            threshold: 0.5,
            epochs: 1,
            stopped_early: false,
            source_epoch: 1,
        }
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn clients_are_averaged_within_a_fold() {
        let runs = vec![
            run("Local", 0, 0.1),
            run("Local", 0, 0.3),
            run("Local", 1, 0.4),
            run("X", 0, 0.9),
        ];
        let row = Row::from_runs("Local", &runs);
        assert_eq!(row.n_runs, 3);
        assert_eq!(row.n_folds, 2);
        assert!((row.auprc.mean - 0.3).abs() < 1e-12);
        assert!((row.auprc.std - 0.1).abs() < 1e-12);
    }
}
