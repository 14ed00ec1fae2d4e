//! Benchmark harness: local, centralized and federated training compared
//! under stratified k-fold cross-validation.
//!
//! Every fold holds out one stratified fold as the common test set and deals
//! the rest across the clients; each client keeps part of its shard for
//! validation. Federated rows run the full platform in-process (parameter
//! server, client nodes and control center over the embedded broker).
//!
//! ```text
//! fedbench run --data synthetic --methods local,centralized,fedavg --folds 5 --seed 7 --out results/
//! ```

pub mod data;
pub mod error;
pub mod federated;
pub mod harness;
pub mod preset;
pub mod report;
pub mod trainer;

pub use error::{BenchError, Result};
pub use harness::{run_comparison, ComparisonConfig, Method};
pub use report::{ResultsTable, Row, Stat};
