//! From-scratch dense binary classifier.

pub mod config;
pub mod data;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use config::{Activation, LayerSpec, ModelConfig, OutputActivation, SeedPolicy};
pub use data::{
    load_csv_dataset, load_csv_raw, split_dataset, stratified_holdout, synth_dataset,
    synth_dataset_with, CrossValidation, Dataset, FoldSplit, PreprocessSpec, Preprocessor,
    SplitSpec, SynthSpec,
};
pub use metrics::{average_precision, evaluate, evaluate_until, EvalMetrics};
pub use network::{build_model, forward, loss_and_grad, Mode};
pub use optim::Optimizer;
pub use train::{
    train_local, train_with_optimizer, GradientModifier, Interrupt, OptimizerKind, StopSignal, TrainOutcome,
    TrainingSettings,
};
