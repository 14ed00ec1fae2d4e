//! Runs every scenario on the same folds and collects the results table.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use fedplat_core::algorithms::AlgorithmKind;
use fedplat_core::model::config::fnv1a;
use fedplat_core::model::metrics::evaluate;
use fedplat_core::model::network::build_model;
use serde_json::json;

use crate::data::{make_folds, BenchData, FoldData};
use crate::federated::run_federated;
use crate::preset::Preset;
use crate::report::{ResultsTable, Row, RunResult};
use crate::trainer::fit;
use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// One model per client on its own shard.
    Local,
    /// One model on the pooled shards.
    Centralized,
    Fed(AlgorithmKind),
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Local => "Local",
            Method::Centralized => "Centralized",
            Method::Fed(k) => k.display_name(),
        }
    }

    pub fn all() -> Vec<Method> {
        let mut v = vec![Method::Local, Method::Centralized];
        v.extend(AlgorithmKind::ALL.into_iter().map(Method::Fed));
        v
    }

    /// Comma-separated list such as `local,centralized,fedavg`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(BenchError::Config("no methods selected".into()));
        }
        Ok(out)
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Method::Local),
            "centralized" | "centralised" => Ok(Method::Centralized),
            other => AlgorithmKind::from_str(other)
                .map(Method::Fed)
                .map_err(|_| BenchError::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub methods: Vec<Method>,
    pub folds: usize,
    pub n_clients: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Scratch space for federation artifacts.
    pub work_dir: PathBuf,
    /// Wall-clock limit per federated experiment.
    pub timeout: Duration,
}

impl ComparisonConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            methods: Method::all(),
            folds: 5,
            n_clients: 3,
            seed: 7,
            preset: Preset::desk(),
            work_dir: work_dir.into(),
            timeout: Duration::from_secs(3600),
        }
    }

    /// Every scenario gets the same number of passes over its data.
    pub fn check_fairness(&self) -> Result<()> {
        let p = &self.preset;
        if p.local_epochs == 0 || p.max_epochs == 0 {
            return Err(BenchError::Fairness("epoch budget must be positive".into()));
        }
        if p.rounds() * p.local_epochs != p.epoch_budget() {
            return Err(BenchError::Fairness(format!(
                "{} rounds x {} local epochs does not match the {}-epoch budget",
                p.rounds(),
                p.local_epochs,
                p.epoch_budget()
            )));
        }
        Ok(())
    }
}

/// Seed for the initial weights of every model trained on `fold`.
pub fn init_seed(seed: u64, fold: usize) -> u64 {
    fnv1a(format!("init/{seed}/{fold}").as_bytes())
}

/// Trains and scores one method on one fold. Local runs produce one result
/// per client.
pub fn run_scenario(method: Method, fold: &FoldData, cfg: &ComparisonConfig) -> Result<Vec<RunResult>> {
    let p = &cfg.preset;
    let model = p.model_config(fold.input_dim(), init_seed(cfg.seed, fold.fold));
    let init = build_model(&model, init_seed(cfg.seed, fold.fold))?;
    let training = p.training(fold.threshold, cfg.seed);
    let label = method.label();
    match method {
        Method::Local | Method::Centralized => {
            let mut process = p.process(1);
            process.rounds = p.epoch_budget() as u64;
            let training = fedplat_core::model::train::TrainingSettings { epochs: 1, ..training };
            let jobs: Vec<(Option<usize>, _, _)> = if method == Method::Local {
                fold.clients
                    .iter()
                    .enumerate()
                    .map(|(c, d)| (Some(c), d.train.clone(), d.val.clone()))
                    .collect()
            } else {
                vec![(None, fold.pooled_train()?, fold.pooled_val()?)]
            };
            let mut out = Vec::new();
            for (client, train, val) in jobs {
                let key = format!("{label}/{}/{}", fold.fold, client.map_or(-1, |c| c as i64));
                let fitted = fit(&model, &init, &train, &val, &training, &process, &key)?;
                let m = evaluate(&model, &fitted.weights, &fold.test, fold.threshold)?;
                let mut r = RunResult::new(label, fold.fold, client, &m);
                r.epochs = fitted.epochs;
                r.stopped_early = fitted.stopped_early;
                r.source_epoch = fitted.source_epoch;
                out.push(r);
            }
            Ok(out)
        }
        Method::Fed(kind) => {
            let settings = p.federated_settings(kind, fold.clients.len(), fold.threshold, cfg.seed);
            let id = format!("bench-s{}-f{}-{}", cfg.seed, fold.fold, kind.name());
            let work = cfg.work_dir.join(&id);
            if work.exists() {
                std::fs::remove_dir_all(&work)?;
            }
            let outcome = run_federated(fold, &model, &settings, &id, &work, cfg.timeout)?;
            let m = evaluate(&model, &outcome.weights, &fold.test, fold.threshold)?;
            let mut r = RunResult::new(label, fold.fold, None, &m);
            r.epochs = outcome.record.rounds.len();
            r.stopped_early = matches!(
                outcome.record.status,
                fedplat_core::protocol::messages::ExperimentStatus::StoppedEarly
            );
            r.source_epoch = outcome.record.final_round.unwrap_or(0);
            Ok(vec![r])
        }
    }
}

/// Every selected method on every fold of `data`.
pub fn run_comparison(data: &BenchData, cfg: &ComparisonConfig) -> Result<ResultsTable> {
    cfg.check_fairness()?;
    if cfg.methods.is_empty() {
        return Err(BenchError::Config("no methods selected".into()));
    }
    let folds = make_folds(data, cfg.folds, cfg.n_clients, cfg.preset.val_fraction, cfg.seed)?;
    let mut runs = Vec::new();
    let mut timings = serde_json::Map::new();
    for method in &cfg.methods {
        let started = Instant::now();
        for fold in &folds {
            log::info!("{} fold {}", method.label(), fold.fold);
            runs.extend(run_scenario(*method, fold, cfg)?);
        }
        timings.insert(method.label().into(), json!(started.elapsed().as_secs_f64()));
    }
    let rows = cfg.methods.iter().map(|m| Row::from_runs(m.label(), &runs)).collect();
    Ok(ResultsTable {
        banner: data.source.banner(),
        synthetic: data.source.is_synthetic(),
        seed: cfg.seed,
        folds: cfg.folds,
        n_clients: cfg.n_clients,
        rows,
        runs,
        meta: json!({
            "preset": cfg.preset,
            "epoch_budget": cfg.preset.epoch_budget(),
            "rounds": cfg.preset.rounds(),
            "source": data.source,
            "n_samples": data.dataset.len(),
            "n_positive": data.dataset.n_positive,
            "seconds": timings,
        }),
    })
}
