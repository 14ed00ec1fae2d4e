//! Epoch loop for local and centralized training.
//!
//! Uses the same plateau and early-stopping controllers as the parameter
//! server, driven by validation loss after every epoch, and the same rule
//! for the returned model: the best epoch after an early stop, otherwise the
//! last one.

use fedplat_core::algorithms::scheduler::{early_stop_step, plateau_step, SchedulerState};
use fedplat_core::model::config::{fnv1a, ModelConfig};
use fedplat_core::model::data::Dataset;
use fedplat_core::model::metrics::evaluate;
use fedplat_core::model::train::{train_with_optimizer, StopSignal, TrainingSettings};
use fedplat_core::schema::ProcessSettings;
use fedplat_core::ModelWeights;
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct FitOutcome {
    #[serde(skip)]
    pub weights: ModelWeights,
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: Option<u64>,
    pub stopped_early: bool,
    /// Epoch whose weights were returned.
    pub source_epoch: u64,
    pub final_lr: f64,
}

/// Trains up to `process.rounds` epochs of `training.epochs == 1` each.
///
/// Optimizer moments persist across epochs. `seed_key` names the run and
/// seeds batch order and dropout per epoch.
pub fn fit(
    cfg: &ModelConfig,
    init: &ModelWeights,
    train: &Dataset,
    val: &Dataset,
    training: &TrainingSettings,
    process: &ProcessSettings,
    seed_key: &str,
) -> Result<FitOutcome> {
    let mut sched = SchedulerState::new(&process.scheduler_config(training.learning_rate));
    let dir = process.monitor_direction();
    let mut optimizer = training.optimizer();
    let mut weights = init.clone();
    let mut best: Option<(u64, ModelWeights)> = None;
    let mut steps = 0;
    for epoch in 1..=process.rounds {
        let settings = TrainingSettings {
            epochs: 1,
            learning_rate: sched.current_lr,
            rng_seed: fnv1a(format!("{}/{seed_key}/{epoch}", training.rng_seed).as_bytes()),
            ..training.clone()
        };
        let out = train_with_optimizer(
            cfg,
            &weights,
            train,
            &settings,
            None,
            &StopSignal::none(),
            &mut optimizer,
        )?;
        steps += out.steps;
        weights = out.weights;
        let loss = evaluate(cfg, &weights, val, training.class_threshold)?.loss;
        if process.plateau.is_some() {
            sched = plateau_step(&sched, loss, dir).1;
        }
        let (stop, next) = early_stop_step(&sched, loss, dir, epoch, "");
        sched = next;
        if sched.best_round == Some(epoch) {
            best = Some((epoch, weights.clone()));
        }
        if stop && process.early_stopping.is_some() {
            let (source_epoch, weights) = best.expect("an improvement precedes any stop");
            return Ok(FitOutcome {
                weights,
                epochs: epoch as usize,
                steps,
                best_epoch: sched.best_round,
                stopped_early: true,
                source_epoch,
                final_lr: sched.current_lr,
            });
        }
    }
    Ok(FitOutcome {
        weights,
        epochs: process.rounds as usize,
        steps,
        best_epoch: sched.best_round,
        stopped_early: false,
        source_epoch: process.rounds,
        final_lr: sched.current_lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedplat_core::model::config::Activation;
    use fedplat_core::model::data::synth_dataset;
    use fedplat_core::model::network::build_model;

    fn setup() -> (ModelConfig, ModelWeights, Dataset, Dataset) {
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w = build_model(&cfg, 1).unwrap();
        (
            cfg,
            w,
            synth_dataset(1, 120, 0.2, 3).unwrap(),
            synth_dataset(2, 40, 0.2, 3).unwrap(),
        )
    }

    #[test]
    fn runs_the_full_budget_without_stopping() {
        let (cfg, w, train, val) = setup();
        let training = TrainingSettings {
            batch_size: 40,
            ..TrainingSettings::default()
        };
        let process = ProcessSettings::new(5, 1);
        let out = fit(&cfg, &w, &train, &val, &training, &process, "t").unwrap();
        assert_eq!(out.epochs, 5);
        assert_eq!(out.steps, 15);
        assert_eq!(out.source_epoch, 5);
        assert!(!out.stopped_early);
    }

    #[test]
    fn early_stop_returns_best_epoch() {
        let (cfg, w, train, val) = setup();
        // a huge learning rate makes validation loss worsen quickly
        let training = TrainingSettings {
            batch_size: 8,
            learning_rate: 0.5,
            ..TrainingSettings::default()
        };
        let mut process = ProcessSettings::new(200, 1);
        process.early_stopping = Some(fedplat_core::schema::EarlyStopSettings {
            patience: 3,
            min_delta: 0.0,
        });
        let out = fit(&cfg, &w, &train, &val, &training, &process, "t").unwrap();
        assert!(out.stopped_early, "{out:?}");
        assert_eq!(Some(out.source_epoch), out.best_epoch);
        assert_eq!(out.epochs as u64, out.source_epoch + 3);
    }
}
