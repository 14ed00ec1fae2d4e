//! Core building blocks of the federated learning platform.
//!
//! - [`model`]: a from-scratch dense network (binary classifier), its optimizers,
//!   classification metrics and tabular dataset handling.
//! - [`algorithms`]: FedAvg, FedProx, FedDyn and SCAFFOLD aggregation plus the
//!   client-side local objective corrections, weighted metric means and the
//!   plateau / early-stopping controllers driven by the parameter server.
//! - [`protocol`]: topics, envelopes, the weight codec, the ACL model and an
//!   embedded in-process broker.
//! - [`schema`]: the experiment document model and its validation rules, shared
//!   by the control center and the parameter server.
//!
//! All training math runs in `f64`. Weights travel as `f32` or `f64` depending on
//! the experiment settings.

pub mod algorithms;
pub mod error;
pub mod model;
pub mod protocol;
pub mod schema;

pub use error::{Error, Result};
pub use model::tensor::{DType, ModelWeights, TensorBlock, TensorValues};
