//! End-to-end checks of the benchmark harness on small synthetic data.

use std::time::Duration;

use fedplat_bench::data::{make_folds, BenchData, ClientData, DataSource, FoldData};
use fedplat_bench::federated::{run_federated, MessageAudit};
use fedplat_bench::harness::{init_seed, run_scenario};
use fedplat_bench::preset::Preset;
use fedplat_bench::{run_comparison, BenchError, ComparisonConfig, Method};
use fedplat_core::algorithms::AlgorithmKind;
use fedplat_core::model::config::Activation;
use fedplat_core::model::data::{synth_dataset_with, SynthSpec};
use fedplat_core::model::network::build_model;
use fedplat_core::model::train::{train_local, OptimizerKind, StopSignal, TrainingSettings};

fn small_preset() -> Preset {
    Preset {
        hidden: vec![8],
        max_epochs: 6,
        plateau_patience: Some(2),
        early_stop_patience: Some(3),
        ..Preset::desk()
    }
}

fn small_data(seed: u64, separation: f64) -> BenchData {
    BenchData::load(DataSource::Synthetic(SynthSpec {
        seed,
        n_samples: 600,
        prevalence: 0.1,
        n_features: 4,
        separation,
    }))
    .unwrap()
}

fn config(dir: &std::path::Path, methods: &str) -> ComparisonConfig {
    let mut cfg = ComparisonConfig::new(dir);
    cfg.methods = Method::parse_list(methods).unwrap();
    cfg.folds = 2;
    cfg.n_clients = 2;
    cfg.seed = 5;
    cfg.preset = small_preset();
    cfg.timeout = Duration::from_secs(60);
    cfg
}

#[test]
fn comparison_is_deterministic() {
    let data = small_data(1, 1.5);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let t1 = run_comparison(&data, &config(a.path(), "local,centralized,fedavg,scaffold")).unwrap();
    let t2 = run_comparison(&data, &config(b.path(), "local,centralized,fedavg,scaffold")).unwrap();
    assert_eq!(t1.rows, t2.rows);
    assert_eq!(t1.runs, t2.runs);
    assert_eq!(t1.row("Local").unwrap().n_runs, 4);
    assert_eq!(t1.row("Local").unwrap().n_folds, 2);
    assert_eq!(t1.row("FedAvg").unwrap().n_runs, 2);
}

#[test]
fn centralized_learns_separable_data() {
    let data = small_data(2, 8.0);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "centralized");
    cfg.preset.max_epochs = 30;
    cfg.preset.dropout = 0.0;
    cfg.preset.learning_rate = 1e-2;
    let table = run_comparison(&data, &cfg).unwrap();
    for r in &table.runs {
        assert!(r.auprc > 0.95, "fold {}: AUPRC {}", r.fold, r.auprc);
    }
}

#[test]
fn tables_carry_the_synthetic_banner() {
    let data = small_data(3, 1.5);
    let dir = tempfile::tempdir().unwrap();
    let table = run_comparison(&data, &config(dir.path(), "local")).unwrap();
    assert!(table.synthetic);
    let files = table.write_all(&dir.path().join("out")).unwrap();
    assert_eq!(files.len(), 3);
    let md = std::fs::read_to_string(&files[2]).unwrap();
    assert!(md.contains("SYNTHETIC"), "{md}");
    assert!(md.contains("| Local |"));
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[1]).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn unequal_budgets_stop_before_training() {
    let data = small_data(4, 1.5);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "local,fedavg");
    cfg.preset.local_epochs = 4;
    cfg.preset.max_epochs = 6;
    assert!(matches!(run_comparison(&data, &cfg), Err(BenchError::Fairness(_))));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn audit_rejects_missing_traffic() {
    let ok = MessageAudit {
        rounds: 3,
        job_requests: 3,
        job_replies: vec![("a".into(), 6), ("b".into(), 6)],
        job_requests_delivered: vec![("a".into(), 3), ("b".into(), 3)],
        model_replies: 2,
        denied: 0,
    };
    assert!(ok.check().is_ok());
    let broken = [
        MessageAudit {
            job_requests: 2,
            ..ok.clone()
        },
        MessageAudit {
            job_replies: vec![("a".into(), 6), ("b".into(), 5)],
            ..ok.clone()
        },
        MessageAudit {
            job_requests_delivered: vec![("a".into(), 0), ("b".into(), 3)],
            ..ok.clone()
        },
        MessageAudit {
            model_replies: 1,
            ..ok.clone()
        },
        MessageAudit {
            denied: 1,
            ..ok.clone()
        },
        MessageAudit {
            rounds: 0,
            job_requests: 0,
            ..ok.clone()
        },
    ];
    for a in broken {
        assert!(matches!(a.check(), Err(BenchError::Audit(_))), "{a:?}");
    }
}

#[test]
fn federated_runs_pass_the_audit() {
    let data = small_data(6, 1.5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "fedprox");
    let folds = make_folds(&data, 2, 2, 0.2, 5).unwrap();
    let runs = run_scenario(Method::Fed(AlgorithmKind::FedProx), &folds[0], &cfg).unwrap();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].epochs >= 1 && runs[0].epochs <= 6);
    assert!(runs[0].auprc > 0.0 && runs[0].auprc <= 1.0);
}

/// One client with full-batch SGD: every FedAvg round is one epoch of
/// plain gradient descent, so R rounds match R centralized epochs.
#[test]
fn single_client_fedavg_matches_gradient_descent() {
    let spec = |seed, n| SynthSpec {
        seed,
        n_samples: n,
        prevalence: 0.2,
        n_features: 3,
        separation: 1.5,
    };
    let train = synth_dataset_with(&spec(10, 80)).unwrap();
    let val = synth_dataset_with(&spec(11, 30)).unwrap();
    let test = synth_dataset_with(&spec(12, 30)).unwrap();
    let fold = FoldData {
        fold: 0,
        clients: vec![ClientData {
            train: train.clone(),
            val,
        }],
        test,
        threshold: 0.2,
    };
    let preset = Preset {
        hidden: vec![5],
        activation: Activation::Tanh,
        dropout: 0.0,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        batch_size: train.len(),
        max_epochs: 4,
        plateau_patience: None,
        early_stop_patience: None,
        ..Preset::desk()
    };
    let cfg = preset.model_config(3, init_seed(1, 0));
    let settings = preset.federated_settings(AlgorithmKind::FedAvg, 1, 0.2, 1);
    let dir = tempfile::tempdir().unwrap();
    let fed = run_federated(
        &fold,
        &cfg,
        &settings,
        "single-client",
        dir.path(),
        Duration::from_secs(60),
    )
    .unwrap();
    assert_eq!(fed.record.rounds.len(), 4);

    let init = build_model(&cfg, init_seed(1, 0)).unwrap();
    let oracle = train_local(
        &cfg,
        &init,
        &train,
        &TrainingSettings {
            epochs: 4,
            ..preset.training(0.2, 99)
        },
        None,
        &StopSignal::none(),
    )
    .unwrap();
    let a = fed.weights.flatten_f64();
    let b = oracle.weights.flatten_f64();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
    }
    assert!(a.iter().zip(init.flatten_f64()).any(|(x, y)| x != &y));
}
