//! Model and schedule shared by every scenario.

use fedplat_core::algorithms::{AlgorithmKind, AlgorithmParams};
use fedplat_core::model::config::{Activation, ModelConfig, SeedPolicy};
use fedplat_core::model::train::{OptimizerKind, TrainingSettings};
use fedplat_core::schema::{EarlyStopSettings, ExperimentSettings, PlateauSettings, ProcessSettings};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs for local and centralized training; rounds for federated runs.
    pub max_epochs: usize,
    /// Local epochs per federated round.
    pub local_epochs: usize,
    /// `None` disables the plateau controller.
    pub plateau_patience: Option<usize>,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// Share of each client's shard kept for validation.
    pub val_fraction: f64,
    pub fedprox_mu: f64,
    pub feddyn_mu: f64,
    pub scaffold_server_step: f64,
}

impl Preset {
    /// 2 x 64 tanh with dropout 0.5, Adam at 1e-3, batch 32, up to 128
    /// epochs or rounds, plateau after 16 and early stop after 48.
    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            dropout: 0.5,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 128,
            local_epochs: 1,
            plateau_patience: Some(16),
            early_stop_patience: Some(48),
            val_fraction: 0.2,
            fedprox_mu: 0.01,
            feddyn_mu: 0.01,
            scaffold_server_step: 1.0,
        }
    }

    /// Optimizer steps allowed per scenario, counted in passes over the data.
    pub fn epoch_budget(&self) -> usize {
        self.max_epochs
    }

    /// Federated rounds so that rounds x local epochs meets the budget.
    pub fn rounds(&self) -> usize {
        self.max_epochs / self.local_epochs.max(1)
    }

    pub fn model_config(&self, input_dim: usize, init_seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::mlp(input_dim, &self.hidden, self.activation, self.dropout);
        cfg.seed_policy = SeedPolicy::Explicit(init_seed);
        cfg
    }

    pub fn training(&self, threshold: f64, rng_seed: u64) -> TrainingSettings {
        TrainingSettings {
            batch_size: self.batch_size,
            epochs: self.local_epochs,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            class_threshold: threshold,
            rng_seed,
            ..TrainingSettings::default()
        }
    }

    /// Round schedule; also drives the epoch loop of non-federated training.
    pub fn process(&self, n_clients: usize) -> ProcessSettings {
        let mut p = ProcessSettings::new(self.rounds() as u64, n_clients);
        p.ack_timeout_secs = 60.0;
        p.train_timeout_secs = 3600.0;
        p.eval_timeout_secs = 600.0;
        p.reply_grace_secs = 60.0;
        p.post_eval = true;
        p.plateau = self.plateau_patience.map(|patience| PlateauSettings {
            patience,
            ..PlateauSettings::default()
        });
        p.early_stopping = self.early_stop_patience.map(|patience| EarlyStopSettings {
            patience,
            ..EarlyStopSettings::default()
        });
        p.keep_rounds = 1;
        p
    }

    pub fn algorithm(&self, kind: AlgorithmKind) -> AlgorithmParams {
        match kind {
            AlgorithmKind::FedAvg => AlgorithmParams::fedavg(),
            AlgorithmKind::FedProx => AlgorithmParams::fedprox(self.fedprox_mu),
            AlgorithmKind::FedDyn => AlgorithmParams::feddyn(self.feddyn_mu),
            AlgorithmKind::Scaffold => {
                let mut p = AlgorithmParams::scaffold(self.learning_rate);
                p.server_step = self.scaffold_server_step;
                p
            }
        }
    }

    pub fn federated_settings(
        &self,
        kind: AlgorithmKind,
        n_clients: usize,
        threshold: f64,
        rng_seed: u64,
    ) -> ExperimentSettings {
        ExperimentSettings {
            process: self.process(n_clients),
            algorithm: self.algorithm(kind),
            training: self.training(threshold, rng_seed),
        }
    }
}

impl Default for Preset {
    fn default() -> Self {
        Self::desk()
    }
}
