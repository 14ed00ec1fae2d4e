//! On-disk experiment artifacts.
//!
//! ```text
//! <root>/experiments/<experiment_id>/
//!     spec.json
//!     global/latest.weights
//!     global/round_<r>.weights      last `keep_rounds` rounds plus the best one
//!     global/final.weights
//!     clients/<client_id>/latest.weights
//!     metrics.jsonl                 one JSON object per round
//!     events.log                    timestamped text lines
//! ```
//!
//! Client nodes use the same layout under their own root.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use fedplat_core::protocol::codec::{read_weight_file, write_atomic, write_weight_file};
use fedplat_core::ModelWeights;
use serde::Serialize;

use crate::{Error, Result};

/// Experiment ids end up in paths, so only a conservative alphabet is accepted.
pub fn check_experiment_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() || id.len() > 128 {
        return Err("must be 1 to 128 characters".into());
    }
    if id.starts_with('.') || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') {
        return Err("may only contain ASCII letters, digits, '-', '_' and '.', and must not start with '.'".into());
    }
    Ok(())
}

pub fn experiment_dir(root: &Path, experiment_id: &str) -> PathBuf {
    root.join("experiments").join(experiment_id)
}

pub fn final_model_path(root: &Path, experiment_id: &str) -> PathBuf {
    experiment_dir(root, experiment_id).join("global").join("final.weights")
}

fn storage(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Storage(format!("{}: {e}", path.display()))
}

#[derive(Debug)]
pub struct ExperimentStore {
    dir: PathBuf,
    keep_rounds: usize,
    kept: BTreeSet<u64>,
    best_round: Option<u64>,
}

impl ExperimentStore {
    pub fn create(root: &Path, experiment_id: &str, keep_rounds: usize) -> Result<Self> {
        check_experiment_id(experiment_id).map_err(Error::Storage)?;
        let dir = experiment_dir(root, experiment_id);
        for sub in ["global", "clients"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| storage(&p, e))?;
        }
        Ok(Self {
            dir,
            keep_rounds,
            kept: BTreeSet::new(),
            best_round: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn round_path(&self, round: u64) -> PathBuf {
        self.dir.join("global").join(format!("round_{round}.weights"))
    }

    pub fn latest_path(&self) -> PathBuf {
        self.dir.join("global").join("latest.weights")
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("global").join("final.weights")
    }

    pub fn client_path(&self, client_id: &str) -> PathBuf {
        self.dir.join("clients").join(client_id).join("latest.weights")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn events_path(&self) -> PathBuf {
        self.dir.join("events.log")
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = serde_json::to_vec_pretty(value)?;
        write_atomic(&path, &bytes).map_err(|e| storage(&path, e))
    }

    /// Writes `round_<r>.weights` and `latest.weights`, then prunes history.
    pub fn write_global(&mut self, round: u64, w: &ModelWeights) -> Result<()> {
        let meta = serde_json::json!({ "round": round });
        let path = self.round_path(round);
        write_weight_file(&path, w, Some(meta.clone())).map_err(|e| storage(&path, e))?;
        let latest = self.latest_path();
        write_weight_file(&latest, w, Some(meta)).map_err(|e| storage(&latest, e))?;
        self.kept.insert(round);
        self.prune()
    }

    /// Protects `round` from pruning; the previous best loses its protection.
    pub fn set_best(&mut self, round: u64) -> Result<()> {
        self.best_round = Some(round);
        self.prune()
    }

    pub fn best_round(&self) -> Option<u64> {
        self.best_round
    }

    pub fn kept_rounds(&self) -> Vec<u64> {
        self.kept.iter().copied().collect()
    }

    fn prune(&mut self) -> Result<()> {
        let recent: BTreeSet<u64> = self.kept.iter().rev().take(self.keep_rounds).copied().collect();
        let doomed: Vec<u64> = self
            .kept
            .iter()
            .copied()
            .filter(|r| !recent.contains(r) && Some(*r) != self.best_round)
            .collect();
        for r in doomed {
            let path = self.round_path(r);
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(storage(&path, e)),
            }
            self.kept.remove(&r);
        }
        Ok(())
    }

    pub fn read_round(&self, round: u64) -> Result<ModelWeights> {
        Ok(read_weight_file(&self.round_path(round))?)
    }

    pub fn write_final(&self, w: &ModelWeights, source_round: u64) -> Result<()> {
        let path = self.final_path();
        write_weight_file(&path, w, Some(serde_json::json!({ "round": source_round })))
            .map_err(|e| storage(&path, e))
    }

    pub fn write_client(&self, client_id: &str, w: &ModelWeights, round: u64) -> Result<()> {
        let path = self.client_path(client_id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| storage(parent, e))?;
        }
        write_weight_file(&path, w, Some(serde_json::json!({ "round": round }))).map_err(|e| storage(&path, e))
    }

    pub fn append_metrics(&self, record: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        append(&self.metrics_path(), &line)
    }

    pub fn event(&self, message: &str) -> Result<()> {
        let line = format!("{} {message}\n", Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true));
        append(&self.events_path(), line.as_bytes())
    }
}

pub(crate) fn append(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| storage(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| storage(path, e))?;
    f.write_all(bytes).map_err(|e| storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedplat_core::TensorBlock;

    fn w(v: f64) -> ModelWeights {
        ModelWeights::new(vec![TensorBlock::from_f64("x", vec![1], vec![v]).unwrap()]).unwrap()
    }

    #[test]
    fn history_keeps_recent_rounds_and_best() {
        let root = tempfile::tempdir().unwrap();
        let mut store = ExperimentStore::create(root.path(), "exp-1", 3).unwrap();
        for r in 1..=4 {
            store.write_global(r, &w(r as f64)).unwrap();
        }
        store.set_best(2).unwrap();
        for r in 5..=8 {
            store.write_global(r, &w(r as f64)).unwrap();
        }
        assert_eq!(store.kept_rounds(), vec![2, 6, 7, 8]);
        assert!(store.round_path(2).exists());
        assert!(!store.round_path(5).exists());
        assert!(read_weight_file(&store.latest_path()).unwrap().bitwise_eq(&w(8.0)));
        store.set_best(7).unwrap();
        assert_eq!(store.kept_rounds(), vec![6, 7, 8]);
        assert!(store.read_round(2).is_err());
    }

    #[test]
    fn metrics_and_events_append_lines() {
        let root = tempfile::tempdir().unwrap();
        let store = ExperimentStore::create(root.path(), "e", 16).unwrap();
        store.append_metrics(&serde_json::json!({"round": 1})).unwrap();
        store.append_metrics(&serde_json::json!({"round": 2})).unwrap();
        store.event("round skipped: insufficient acks").unwrap();
        let metrics = fs::read_to_string(store.metrics_path()).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        let events = fs::read_to_string(store.events_path()).unwrap();
        assert!(events.trim_end().ends_with("round skipped: insufficient acks"));
    }

    #[test]
    fn rejects_path_like_ids() {
        assert!(check_experiment_id("../etc").is_err());
        assert!(check_experiment_id("a/b").is_err());
        assert!(check_experiment_id("").is_err());
        assert!(check_experiment_id("0f8fad5b-d9cb-469f-a165-70867728950e").is_ok());
    }
}
