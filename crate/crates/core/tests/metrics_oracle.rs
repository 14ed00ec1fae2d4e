//! Average precision against a brute-force enumeration of the PR step function.

use fedplat_core::model::metrics::{average_precision, metrics_from_scores};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// For every distinct score taken as a threshold (descending), count the
/// confusion matrix from scratch and accumulate `(R_k - R_{k-1}) * P_k`.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 1).count();
        let fp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 0).count();
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

#[test]
fn matches_brute_force_on_500_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checked = 0;
    while checked < 500 {
        let n = rng.random_range(1..=32);
        // coarse score grid so ties are common
        let levels = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        if !labels.contains(&1) {
            continue;
        }
        let fast = average_precision(&scores, &labels).unwrap();
        let slow = brute_force_ap(&scores, &labels);
        assert_eq!(fast, slow, "scores {scores:?} labels {labels:?}");
        checked += 1;
    }
}

#[test]
fn perfect_classifier_and_constant_scores() {
    let labels = [1, 1, 0, 0, 0, 1, 0];
    let perfect: Vec<f64> = labels.iter().map(|&y| if y == 1 { 0.9 } else { 0.1 }).collect();
    assert_eq!(average_precision(&perfect, &labels).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.5; 7], &labels).unwrap(), 3.0 / 7.0);
}

proptest! {
    #[test]
    fn metrics_are_fractions_and_f1_is_harmonic_mean(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..64),
        threshold in 0.0f64..=1.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        labels[0] = 1;
        let m = metrics_from_scores(&scores, &labels, threshold).unwrap();
        for v in [m.precision, m.recall, m.f1, m.auprc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if m.precision + m.recall > 0.0 {
            let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - f1).abs() < 1e-15);
        }
        prop_assert_eq!(m.n_samples, scores.len());
    }
}
