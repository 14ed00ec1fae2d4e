//! Local training loop: shuffled mini-batches, SGD or Adam, optional gradient
//! modifier, and cooperative interruption (deadline or cancel flag) checked
//! between batches.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::data::Dataset;
use super::network::loss_and_grad;
use super::optim::Optimizer;
use super::tensor::ModelWeights;
use crate::{Error, Result};

/// Additive transform applied to the raw gradient of every batch.
pub trait GradientModifier: Send + Sync {
    fn modify(&self, weights: &ModelWeights, grads: &mut ModelWeights) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-7
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub batch_size: usize,
    /// Local passes over the training data per call.
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default = "default_threshold")]
    pub class_threshold: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 1,
            loss: LossKind::BinaryCrossEntropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            class_threshold: default_threshold(),
            rng_seed: 0,
        }
    }
}

impl TrainingSettings {
    /// Field-level problems as `(field, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.batch_size < 1 {
            out.push(("batch_size", "must be >= 1".to_string()));
        }
        if self.epochs < 1 {
            out.push(("epochs", "must be >= 1".to_string()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push(("learning_rate", "must be a positive number".to_string()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            out.push(("adam_beta1", "must be in [0, 1)".to_string()));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            out.push(("adam_beta2", "must be in [0, 1)".to_string()));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            out.push(("adam_epsilon", "must be a positive number".to_string()));
        }
        if !(0.0..=1.0).contains(&self.class_threshold) {
            out.push(("class_threshold", "must be in [0, 1]".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::InvalidConfig(format!("{field} {msg}"))),
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(),
            OptimizerKind::Adam => {
                Optimizer::adam(self.adam_beta1, self.adam_beta2, self.adam_epsilon)
            }
        }
    }
}

/// Conditions that end training early, checked before every batch.
#[derive(Debug, Clone, Default)]
pub struct StopSignal {
    pub deadline: Option<Instant>,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl StopSignal {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn deadline(at: Instant) -> Self {
        Self {
            deadline: Some(at),
            cancel: None,
        }
    }

    fn check(&self) -> Option<Interrupt> {
        if let Some(flag) = &self.cancel {
            if flag.load(Ordering::SeqCst) {
                return Some(Interrupt::Cancelled);
            }
        }
        match self.deadline {
            Some(d) if Instant::now() >= d => Some(Interrupt::Deadline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interrupt {
    Deadline,
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean batch loss of each fully completed epoch.
    pub history: Vec<f64>,
    pub completed_epochs: usize,
    /// Optimizer steps actually taken, including those of a truncated epoch.
    pub steps: usize,
    pub interrupted: Option<Interrupt>,
}

/// Runs up to `settings.epochs` passes of mini-batch training.
///
/// Batches are reshuffled each epoch from `settings.rng_seed` (no shuffle when
/// one batch covers the whole set). When `stop` fires between batches the
/// current weights are returned and `completed_epochs` counts full epochs only.
pub fn train_local(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    settings: &TrainingSettings,
    modifier: Option<&dyn GradientModifier>,
    stop: &StopSignal,
) -> Result<TrainOutcome> {
    let mut optimizer = settings.optimizer();
    train_with_optimizer(config, weights, dataset, settings, modifier, stop, &mut optimizer)
}

/// [`train_local`] with caller-owned optimizer state, so moment estimates
/// can carry over between calls. The optimizer kind in `settings` is ignored.
pub fn train_with_optimizer(
    config: &ModelConfig,
    weights: &ModelWeights,
    dataset: &Dataset,
    settings: &TrainingSettings,
    modifier: Option<&dyn GradientModifier>,
    stop: &StopSignal,
    optimizer: &mut Optimizer,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    settings.validate()?;
    let mut weights = weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.rng_seed);
    let n = dataset.len();
    let batch_size = settings.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    let mut steps = 0;

    for epoch in 0..settings.epochs {
        if batch_size < n {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            if let Some(reason) = stop.check() {
                return Ok(TrainOutcome {
                    weights,
                    completed_epochs: history.len(),
                    history,
                    steps,
                    interrupted: Some(reason),
                });
            }
            let (loss, grads) = if chunk.len() == n {
                loss_and_grad(
                    config,
                    &weights,
                    dataset.features.view(),
                    &dataset.labels,
                    modifier,
                    &mut rng,
                )?
            } else {
                let xb = dataset.features.select(Axis(0), chunk);
                let yb: Vec<u8> = chunk.iter().map(|&i| dataset.labels[i]).collect();
                loss_and_grad(config, &weights, xb.view(), &yb, modifier, &mut rng)?
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            optimizer.step(&mut weights, &grads, settings.learning_rate)?;
            steps += 1;
            loss_sum += loss * chunk.len() as f64;
        }
        history.push(loss_sum / n as f64);
    }

    Ok(TrainOutcome {
        weights,
        completed_epochs: history.len(),
        history,
        steps,
        interrupted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Activation;
    use crate::model::data::synth_dataset;
    use crate::model::network::build_model;
    use std::time::Duration;

    fn sgd_settings(batch_size: usize, epochs: usize, lr: f64) -> TrainingSettings {
        TrainingSettings {
            batch_size,
            epochs,
            optimizer: OptimizerKind::Sgd,
            learning_rate: lr,
            ..TrainingSettings::default()
        }
    }

    #[test]
    fn one_full_batch_sgd_epoch_is_one_gradient_step() {
        let ds = synth_dataset(3, 40, 0.25, 4).unwrap();
        let cfg = ModelConfig::mlp(4, &[6], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 9).unwrap();
        let lr = 0.05;
        let out = train_local(&cfg, &w0, &ds, &sgd_settings(ds.len(), 1, lr), None, &StopSignal::none())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, g) = loss_and_grad(&cfg, &w0, ds.features.view(), &ds.labels, None, &mut rng).unwrap();
        let mut expected = w0.clone();
        expected.axpy(-lr, &g).unwrap();
        assert!(out.weights.bitwise_eq(&expected));
        assert_eq!(out.completed_epochs, 1);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn expired_deadline_returns_input() {
        let ds = synth_dataset(1, 30, 0.2, 3).unwrap();
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 1).unwrap();
        let past = Instant::now() - Duration::from_millis(5);
        let out = train_local(
            &cfg,
            &w0,
            &ds,
            &TrainingSettings::default(),
            None,
            &StopSignal::deadline(past),
        )
        .unwrap();
        assert!(out.weights.bitwise_eq(&w0));
        assert_eq!(out.completed_epochs, 0);
        assert_eq!(out.steps, 0);
        assert_eq!(out.interrupted, Some(Interrupt::Deadline));
    }

    #[test]
    fn cancel_flag_interrupts() {
        let ds = synth_dataset(1, 30, 0.2, 3).unwrap();
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 1).unwrap();
        let flag = Arc::new(AtomicBool::new(true));
        let stop = StopSignal {
            deadline: None,
            cancel: Some(flag),
        };
        let out = train_local(&cfg, &w0, &ds, &TrainingSettings::default(), None, &stop).unwrap();
        assert_eq!(out.interrupted, Some(Interrupt::Cancelled));
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = synth_dataset(1, 30, 0.2, 3).unwrap().subset(&[]);
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 1).unwrap();
        assert!(matches!(
            train_local(&cfg, &w0, &ds, &TrainingSettings::default(), None, &StopSignal::none()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn non_finite_loss_is_a_training_failure() {
        let mut ds = synth_dataset(1, 30, 0.2, 3).unwrap();
        ds.features[[0, 0]] = f64::NAN;
        let cfg = ModelConfig::mlp(3, &[4], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 1).unwrap();
        let res = train_local(&cfg, &w0, &ds, &sgd_settings(30, 1, 0.1), None, &StopSignal::none());
        assert!(matches!(res, Err(Error::Training(_))));
    }

    #[test]
    fn adam_training_reduces_loss_and_is_deterministic() {
        let ds = synth_dataset(5, 200, 0.3, 4).unwrap();
        let cfg = ModelConfig::mlp(4, &[8], Activation::Tanh, 0.2);
        let w0 = build_model(&cfg, 2).unwrap();
        let settings = TrainingSettings {
            batch_size: 16,
            epochs: 20,
            learning_rate: 0.01,
            rng_seed: 4,
            ..TrainingSettings::default()
        };
        let a = train_local(&cfg, &w0, &ds, &settings, None, &StopSignal::none()).unwrap();
        let b = train_local(&cfg, &w0, &ds, &settings, None, &StopSignal::none()).unwrap();
        assert!(a.weights.bitwise_eq(&b.weights));
        assert!(a.history.last().unwrap() < a.history.first().unwrap());
        assert_eq!(a.steps, 20 * 13);
    }

    #[test]
    fn shared_optimizer_continues_moments() {
        let ds = synth_dataset(5, 64, 0.3, 4).unwrap();
        let cfg = ModelConfig::mlp(4, &[5], Activation::Tanh, 0.0);
        let w0 = build_model(&cfg, 2).unwrap();
        let one = TrainingSettings {
            batch_size: 64,
            epochs: 1,
            ..TrainingSettings::default()
        };
        let two = TrainingSettings { epochs: 2, ..one.clone() };
        let both = train_local(&cfg, &w0, &ds, &two, None, &StopSignal::none()).unwrap();
        let mut opt = one.optimizer();
        let first = train_with_optimizer(&cfg, &w0, &ds, &one, None, &StopSignal::none(), &mut opt).unwrap();
        let second =
            train_with_optimizer(&cfg, &first.weights, &ds, &one, None, &StopSignal::none(), &mut opt).unwrap();
        assert!(second.weights.bitwise_eq(&both.weights));
        // a fresh optimizer restarts the bias correction
        let restarted = train_local(&cfg, &first.weights, &ds, &one, None, &StopSignal::none()).unwrap();
        assert!(!restarted.weights.bitwise_eq(&both.weights));
    }

    #[test]
    fn invalid_settings_rejected() {
        let s = TrainingSettings {
            batch_size: 0,
            learning_rate: 0.0,
            ..TrainingSettings::default()
        };
        let fields: Vec<_> = s.problems().into_iter().map(|(f, _)| f).collect();
        assert_eq!(fields, ["batch_size", "learning_rate"]);
    }
}
