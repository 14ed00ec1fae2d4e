//! Threshold metrics and average precision for binary classifiers.

use std::time::Instant;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::Dataset;
use super::network::{bce_loss, forward, Mode};
use super::tensor::ModelWeights;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    pub n_samples: usize,
    pub threshold_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Area under the precision-recall step function.
///
/// Samples are visited by descending score; equal scores form one threshold.
/// `AP = sum_k (R_k - R_{k-1}) * P_k`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Predicted probabilities in inference mode, computed in chunks so a
/// deadline can end the pass early.
pub fn predict(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    deadline: Option<Instant>,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 1024;
    // inference draws no randomness; the rng only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(dataset.len());
    let mut start = 0;
    while start < dataset.len() {
        if let Some(d) = deadline {
            if Instant::now() >= d {
                return Err(Error::Training("evaluation deadline exceeded".into()));
            }
        }
        let end = (start + CHUNK).min(dataset.len());
        let view = dataset.features.slice(s![start..end, ..]);
        out.extend(forward(config, weights, view, Mode::Infer, &mut rng)?);
        start = end;
    }
    Ok(out)
}

pub fn metrics_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalMetrics> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = Confusion::at_threshold(scores, labels, threshold);
    let precision = c.precision();
    let recall = c.recall();
    Ok(EvalMetrics {
        loss: bce_loss(scores, labels),
        precision,
        recall,
        f1: f1_score(precision, recall),
        auprc: average_precision(scores, labels)?,
        n_samples: scores.len(),
        threshold_used: threshold,
    })
}

pub fn evaluate(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    threshold: f64,
) -> Result<EvalMetrics> {
    evaluate_until(config, weights, dataset, threshold, None)
}

pub fn evaluate_until(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    threshold: f64,
    deadline: Option<Instant>,
) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = predict(config, weights, dataset, deadline)?;
    metrics_from_scores(&scores, &dataset.labels, threshold)
}
