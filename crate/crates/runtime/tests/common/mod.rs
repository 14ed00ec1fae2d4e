#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fedplat_core::model::data::synth_dataset;
use fedplat_core::protocol::broker::PublishRecord;
use fedplat_core::protocol::{EmbeddedBroker, Envelope, MsgType};
use fedplat_runtime::data::{holdout, DataLoader, LocalData, StaticData};
use fedplat_runtime::{Error, Result};
use serde_json::{json, Value};

pub const N_FEATURES: usize = 4;

pub fn local(seed: u64, n: usize) -> LocalData {
    holdout(&synth_dataset(seed, n, 0.1, N_FEATURES).unwrap(), 0.25, seed, None).unwrap()
}

pub fn loader(seed: u64, n: usize) -> Arc<dyn DataLoader> {
    Arc::new(StaticData(local(seed, n)))
}

/// Everything as evaluation data, as an observer sees it.
pub fn observer_loader(seed: u64, n: usize) -> Arc<dyn DataLoader> {
    let ds = synth_dataset(seed, n, 0.1, N_FEATURES).unwrap();
    Arc::new(StaticData(LocalData::new(None, Some(ds))))
}

/// Serves the data, except that load number `fail_on` (1-based) errors.
pub struct FlakyLoader {
    pub data: LocalData,
    pub fail_on: usize,
    pub calls: AtomicUsize,
}

impl DataLoader for FlakyLoader {
    fn load(&self) -> Result<LocalData> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if n == self.fail_on {
            return Err(Error::Loader("disk unavailable".into()));
        }
        Ok(self.data.clone())
    }
}

pub fn model_json(hidden: usize) -> Value {
    json!({
        "input_dim": N_FEATURES,
        "layers": [
            {"units": hidden, "activation": "tanh"},
            {"units": 1, "activation": "linear"}
        ]
    })
}

pub fn settings_json(rounds: u64, min_replies: usize, algorithm: Value) -> Value {
    json!({
        "process": {
            "rounds": rounds,
            "min_replies": min_replies,
            "ack_timeout_secs": 0.3,
            "train_timeout_secs": 30.0,
            "eval_timeout_secs": 5.0,
            "reply_grace_secs": 1.0
        },
        "algorithm": algorithm,
        "training": {"batch_size": 16, "epochs": 1, "learning_rate": 0.01, "rng_seed": 7}
    })
}

/// Settings for jobs that keep a node busy far longer than any test waits.
pub fn long_job(mut settings: Value) -> Value {
    settings["training"]["epochs"] = json!(100000);
    settings["training"]["batch_size"] = json!(1);
    settings
}

pub fn envelopes(broker: &EmbeddedBroker) -> Vec<(PublishRecord, Envelope)> {
    broker
        .history()
        .into_iter()
        .map(|r| {
            let env = Envelope::from_bytes(&r.payload).unwrap();
            (r, env)
        })
        .collect()
}

pub fn of_type(broker: &EmbeddedBroker, t: MsgType) -> Vec<(PublishRecord, Envelope)> {
    envelopes(broker).into_iter().filter(|(_, e)| e.msg_type() == t).collect()
}
