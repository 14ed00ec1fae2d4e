//! Experiment documents and their validation.
//!
//! A request carries two JSON documents, `model_config` and `settings`.
//! [`validate_experiment`] checks both and reports every problem with a
//! slash-separated path such as `settings/algorithm/mu`. The control center
//! and the parameter server run the same function.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::algorithms::{AlgorithmKind, AlgorithmParams, Direction, SchedulerConfig};
use crate::model::config::ModelConfig;
use crate::model::tensor::DType;
use crate::model::train::TrainingSettings;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ValidationReport {
    pub valid: bool,
    pub errors: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn from_errors(errors: Vec<ValidationIssue>) -> Self {
        Self {
            valid: errors.is_empty(),
            errors,
        }
    }

    pub fn paths(&self) -> Vec<&str> {
        self.errors.iter().map(|e| e.path.as_str()).collect()
    }

    pub fn has_path(&self, path: &str) -> bool {
        self.errors.iter().any(|e| e.path == path)
    }
}

fn default_ack_timeout() -> f64 {
    30.0
}
fn default_train_timeout() -> f64 {
    600.0
}
fn default_eval_timeout() -> f64 {
    60.0
}
fn default_grace() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}
fn default_keep_rounds() -> usize {
    16
}
fn default_plateau_patience() -> usize {
    16
}
fn default_factor() -> f64 {
    0.5
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_stop_patience() -> usize {
    48
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSettings {
    #[serde(default = "default_plateau_patience")]
    pub patience: usize,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub min_lr: f64,
}

impl Default for PlateauSettings {
    fn default() -> Self {
        Self {
            patience: default_plateau_patience(),
            factor: default_factor(),
            min_delta: default_min_delta(),
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSettings {
    #[serde(default = "default_stop_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

impl Default for EarlyStopSettings {
    fn default() -> Self {
        Self {
            patience: default_stop_patience(),
            min_delta: default_min_delta(),
        }
    }
}

/// Federated process settings. Durations are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSettings {
    pub rounds: u64,
    pub min_replies: usize,
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_secs: f64,
    #[serde(default = "default_train_timeout")]
    pub train_timeout_secs: f64,
    #[serde(default = "default_eval_timeout")]
    pub eval_timeout_secs: f64,
    /// Extra wait after train and eval timeouts before replies are given up.
    #[serde(default = "default_grace")]
    pub reply_grace_secs: f64,
    #[serde(default)]
    pub pre_eval: bool,
    #[serde(default = "default_true")]
    pub post_eval: bool,
    #[serde(default = "default_true")]
    pub allow_metrics_upload_default: bool,
    #[serde(default)]
    pub plateau: Option<PlateauSettings>,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopSettings>,
    /// Value type of weights on the wire and on disk.
    #[serde(default = "default_wire_dtype")]
    pub wire_dtype: DType,
    /// How many per-round global models to keep besides the best one.
    #[serde(default = "default_keep_rounds")]
    pub keep_rounds: usize,
}

fn default_wire_dtype() -> DType {
    DType::F64
}

impl ProcessSettings {
    pub fn new(rounds: u64, min_replies: usize) -> Self {
        Self {
            rounds,
            min_replies,
            ack_timeout_secs: default_ack_timeout(),
            train_timeout_secs: default_train_timeout(),
            eval_timeout_secs: default_eval_timeout(),
            reply_grace_secs: default_grace(),
            pre_eval: false,
            post_eval: true,
            allow_metrics_upload_default: true,
            plateau: None,
            early_stopping: None,
            wire_dtype: DType::F64,
            keep_rounds: default_keep_rounds(),
        }
    }

    pub fn ack_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.ack_timeout_secs)
    }

    pub fn train_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.train_timeout_secs)
    }

    pub fn eval_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.eval_timeout_secs)
    }

    /// Reply deadline measured from the job broadcast.
    pub fn reply_window(&self) -> Duration {
        let evals = self.pre_eval as u32 + self.post_eval as u32;
        self.train_timeout() + self.eval_timeout() * evals + Duration::from_secs_f64(self.reply_grace_secs)
    }

    pub fn scheduler_config(&self, initial_lr: f64) -> SchedulerConfig {
        let mut cfg = SchedulerConfig::new(initial_lr);
        match &self.plateau {
            Some(p) => {
                cfg.plateau_patience = p.patience;
                cfg.reduce_factor = p.factor;
                cfg.min_delta = p.min_delta;
                cfg.min_lr = p.min_lr;
            }
            None => cfg.plateau_patience = 0,
        }
        match &self.early_stopping {
            Some(e) => {
                cfg.stop_patience = e.patience;
                cfg.stop_min_delta = e.min_delta;
            }
            None => cfg.stop_patience = 0,
        }
        cfg
    }

    /// Schedulers monitor the weighted post-evaluation loss.
    pub fn monitor_direction(&self) -> Direction {
        Direction::Minimize
    }

    fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.rounds < 1 {
            out.push(("rounds", "must be >= 1".to_string()));
        }
        if self.min_replies < 1 {
            out.push(("min_replies", "must be >= 1".to_string()));
        }
        for (field, v) in [
            ("ack_timeout_secs", self.ack_timeout_secs),
            ("train_timeout_secs", self.train_timeout_secs),
            ("eval_timeout_secs", self.eval_timeout_secs),
        ] {
            if !(v.is_finite() && v > 0.0 && v < 1e9) {
                out.push((field, "must be a positive number of seconds".to_string()));
            }
        }
        if !(self.reply_grace_secs.is_finite() && (0.0..1e9).contains(&self.reply_grace_secs)) {
            out.push(("reply_grace_secs", "must be a non-negative number of seconds".to_string()));
        }
        if (self.plateau.is_some() || self.early_stopping.is_some()) && !self.post_eval {
            out.push((
                "post_eval",
                "must be true when plateau or early stopping is enabled".to_string(),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub process: ProcessSettings,
    pub algorithm: AlgorithmParams,
    pub training: TrainingSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment_id: String,
    pub model_config: ModelConfig,
    pub settings: ExperimentSettings,
}

impl ExperimentSpec {
    pub fn algorithm_kind(&self) -> AlgorithmKind {
        self.settings.algorithm.kind
    }
}

/// The pair of raw documents submitted by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRequestInput {
    pub model_config: Value,
    pub settings: Value,
}

impl ExperimentRequestInput {
    pub fn from_typed(model_config: &ModelConfig, settings: &ExperimentSettings) -> Self {
        Self {
            model_config: serde_json::to_value(model_config).expect("model config serializes"),
            settings: serde_json::to_value(settings).expect("settings serialize"),
        }
    }
}

fn join(base: &str, tail: &str) -> String {
    if tail.is_empty() {
        base.to_string()
    } else {
        format!("{base}/{tail}")
    }
}

/// Field named by a serde "missing field" message; the error path stops at
/// the parent object in that case.
fn missing_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("missing field `")?.split('`').next()
}

fn parse_at<T: DeserializeOwned>(value: &Value, base: &str) -> Result<T, ValidationIssue> {
    serde_path_to_error::deserialize::<_, T>(value).map_err(|err| {
        let mut segments: Vec<String> = Vec::new();
        for seg in err.path().iter() {
            match seg {
                serde_path_to_error::Segment::Seq { index } => segments.push(index.to_string()),
                serde_path_to_error::Segment::Map { key } => segments.push(key.clone()),
                serde_path_to_error::Segment::Enum { variant } => segments.push(variant.clone()),
                serde_path_to_error::Segment::Unknown => {}
            }
        }
        let msg = err.inner().to_string();
        if let Some(field) = missing_field(&msg) {
            segments.push(field.to_string());
        }
        ValidationIssue::new(join(base, &segments.join("/")), msg)
    })
}

fn model_config_issues(cfg: &ModelConfig) -> Vec<ValidationIssue> {
    let base = "model_config";
    let mut out = Vec::new();
    if cfg.input_dim == 0 {
        out.push(ValidationIssue::new(format!("{base}/input_dim"), "must be >= 1"));
    }
    if cfg.layers.is_empty() {
        out.push(ValidationIssue::new(format!("{base}/layers"), "at least one layer is required"));
    }
    for (i, layer) in cfg.layers.iter().enumerate() {
        if layer.units == 0 {
            out.push(ValidationIssue::new(format!("{base}/layers/{i}/units"), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&layer.dropout_rate) {
            out.push(ValidationIssue::new(
                format!("{base}/layers/{i}/dropout_rate"),
                "must be in [0, 1)",
            ));
        }
    }
    if let Some(last) = cfg.layers.last() {
        let i = cfg.layers.len() - 1;
        if last.units != 1 {
            out.push(ValidationIssue::new(
                format!("{base}/layers/{i}/units"),
                "the output layer must have exactly one unit",
            ));
        }
        if last.dropout_rate != 0.0 && (0.0..1.0).contains(&last.dropout_rate) {
            out.push(ValidationIssue::new(
                format!("{base}/layers/{i}/dropout_rate"),
                "the output layer must not use dropout",
            ));
        }
    }
    out
}

fn section<'a>(doc: &'a Value, key: &str, base: &str, errors: &mut Vec<ValidationIssue>) -> Option<&'a Value> {
    match doc.get(key) {
        Some(v) => Some(v),
        None => {
            errors.push(ValidationIssue::new(join(base, key), "missing section"));
            None
        }
    }
}

fn field_issues(base: &str, problems: Vec<(&'static str, String)>) -> Vec<ValidationIssue> {
    problems
        .into_iter()
        .map(|(field, msg)| ValidationIssue::new(format!("{base}/{field}"), msg))
        .collect()
}

/// Parses both documents, collecting every problem found.
pub fn parse_documents(
    model_config: &Value,
    settings: &Value,
) -> Result<(ModelConfig, ExperimentSettings), ValidationReport> {
    let mut errors = Vec::new();

    let cfg = match parse_at::<ModelConfig>(model_config, "model_config") {
        Ok(cfg) => {
            errors.extend(model_config_issues(&cfg));
            Some(cfg)
        }
        Err(e) => {
            errors.push(e);
            None
        }
    };

    let mut parsed = None;
    if !settings.is_object() {
        errors.push(ValidationIssue::new("settings", "must be an object"));
    } else {
        if let Some(obj) = settings.as_object() {
            for key in obj.keys() {
                if !["process", "algorithm", "training"].contains(&key.as_str()) {
                    errors.push(ValidationIssue::new(format!("settings/{key}"), "unknown section"));
                }
            }
        }
        let process = section(settings, "process", "settings", &mut errors)
            .and_then(|v| parse_at::<ProcessSettings>(v, "settings/process").map_err(|e| errors.push(e)).ok());
        let algorithm = section(settings, "algorithm", "settings", &mut errors)
            .and_then(|v| parse_at::<AlgorithmParams>(v, "settings/algorithm").map_err(|e| errors.push(e)).ok());
        let training = section(settings, "training", "settings", &mut errors)
            .and_then(|v| parse_at::<TrainingSettings>(v, "settings/training").map_err(|e| errors.push(e)).ok());
        if let Some(p) = &process {
            errors.extend(field_issues("settings/process", p.problems()));
        }
        if let Some(a) = &algorithm {
            errors.extend(field_issues("settings/algorithm", a.problems()));
        }
        if let Some(t) = &training {
            errors.extend(field_issues("settings/training", t.problems()));
        }
        if let (Some(process), Some(algorithm), Some(training)) = (process, algorithm, training) {
            parsed = Some(ExperimentSettings {
                process,
                algorithm,
                training,
            });
        }
    }

    match (cfg, parsed) {
        (Some(cfg), Some(settings)) if errors.is_empty() => Ok((cfg, settings)),
        _ => Err(ValidationReport::from_errors(errors)),
    }
}

/// Structural and conditional validation of a request. Pure.
pub fn validate_experiment(model_config: &Value, settings: &Value) -> ValidationReport {
    match parse_documents(model_config, settings) {
        Ok(_) => ValidationReport::from_errors(Vec::new()),
        Err(report) => report,
    }
}

/// Rules that depend on the federation a spec runs in.
pub fn federation_issues(settings: &ExperimentSettings, n_participants: usize) -> Vec<ValidationIssue> {
    let mut out = Vec::new();
    if settings.process.min_replies > n_participants {
        out.push(ValidationIssue::new(
            "settings/process/min_replies",
            format!(
                "exceeds the {n_participants} registered participant node(s)"
            ),
        ));
    }
    out
}
