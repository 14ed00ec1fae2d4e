//! Envelopes and the payload of every message type.
//!
//! On the wire an envelope is one JSON object:
//! `{version, msg_type, experiment_id, round, sender_id, sent_at, payload}`.

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::acl::Role;
use super::codec::WireWeights;
use super::topics::MsgType;
use crate::algorithms::AlgorithmParams;
use crate::model::config::ModelConfig;
use crate::model::metrics::EvalMetrics;
use crate::model::train::TrainingSettings;
use crate::schema::ValidationIssue;
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_PAYLOAD_BYTES: usize = 64 * 1024 * 1024;

/// Raw user documents; the parameter server validates them again on receipt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRequest {
    pub model_config: serde_json::Value,
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExperimentAccepted {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionKind {
    Invalid,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRejected {
    pub kind: RejectionKind,
    pub errors: Vec<ValidationIssue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub model_config: ModelConfig,
    /// Learning rate already adjusted by the server-side scheduler.
    pub training: TrainingSettings,
    pub algorithm: AlgorithmParams,
    pub weights: WireWeights,
    /// SCAFFOLD server control variate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_control: Option<WireWeights>,
    pub pre_eval: bool,
    pub post_eval: bool,
    pub train_timeout_ms: u64,
    pub eval_timeout_ms: u64,
    /// Consent default when the node has no explicit setting.
    pub allow_metrics_upload_default: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct JobAcknowledge {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReply {
    pub weights: WireWeights,
    pub n_train_samples: usize,
    pub completed_epochs: usize,
    pub steps: usize,
    pub interrupted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_c: Option<WireWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_eval: Option<EvalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_eval: Option<EvalMetrics>,
    /// Set when the node did not consent to metrics upload.
    #[serde(default)]
    pub metrics_withheld: bool,
    /// Diagnostics for evaluation steps that failed but were tolerated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailed {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobAbort {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelRequest {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WireWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    /// Round whose global model this is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_round: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModelReply {
    pub fn failure(msg: impl Into<String>) -> Self {
        Self {
            weights: None,
            model_config: None,
            source_round: None,
            error: Some(msg.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeState {
    Idle,
    Training,
    Evaluating,
    Aggregating,
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Running,
    Completed,
    StoppedEarly,
    Failed,
}

impl ExperimentStatus {
    pub fn is_finished(self) -> bool {
        self != ExperimentStatus::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOutcomeKind {
    Aggregated,
    SkippedAcks,
    SkippedReplies,
}

/// Sample-weighted means of the evaluation metrics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct WeightedMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    pub n_reports: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u64,
    pub outcome: RoundOutcomeKind,
    pub participants: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_eval: Option<WeightedMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_eval: Option<WeightedMetrics>,
    pub learning_rate: f64,
}

/// Experiment progress attached to parameter-server status reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentProgress {
    pub status: ExperimentStatus,
    pub rounds_total: u64,
    pub rounds_done: u64,
    pub algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_round: Option<RoundSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_round: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub client_id: String,
    pub role: Role,
    pub state: NodeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<String>,
    pub round: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub heartbeat_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<ExperimentProgress>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ExperimentRequest(ExperimentRequest),
    ExperimentAccepted(ExperimentAccepted),
    ExperimentRejected(ExperimentRejected),
    JobRequest(Box<JobRequest>),
    JobAcknowledge(JobAcknowledge),
    JobReply(Box<JobReply>),
    JobFailed(JobFailed),
    JobAbort(JobAbort),
    ModelRequest(ModelRequest),
    ModelReply(Box<ModelReply>),
    StatusReport(Box<StatusReport>),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::ExperimentRequest(_) => MsgType::ExperimentRequest,
            Payload::ExperimentAccepted(_) => MsgType::ExperimentAccepted,
            Payload::ExperimentRejected(_) => MsgType::ExperimentRejected,
            Payload::JobRequest(_) => MsgType::JobRequest,
            Payload::JobAcknowledge(_) => MsgType::JobAcknowledge,
            Payload::JobReply(_) => MsgType::JobReply,
            Payload::JobFailed(_) => MsgType::JobFailed,
            Payload::JobAbort(_) => MsgType::JobAbort,
            Payload::ModelRequest(_) => MsgType::ModelRequest,
            Payload::ModelReply(_) => MsgType::ModelReply,
            Payload::StatusReport(_) => MsgType::StatusReport,
        }
    }

    fn to_value(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Payload::ExperimentRequest(p) => serde_json::to_value(p)?,
            Payload::ExperimentAccepted(p) => serde_json::to_value(p)?,
            Payload::ExperimentRejected(p) => serde_json::to_value(p)?,
            Payload::JobRequest(p) => serde_json::to_value(p)?,
            Payload::JobAcknowledge(p) => serde_json::to_value(p)?,
            Payload::JobReply(p) => serde_json::to_value(p)?,
            Payload::JobFailed(p) => serde_json::to_value(p)?,
            Payload::JobAbort(p) => serde_json::to_value(p)?,
            Payload::ModelRequest(p) => serde_json::to_value(p)?,
            Payload::ModelReply(p) => serde_json::to_value(p)?,
            Payload::StatusReport(p) => serde_json::to_value(p)?,
        })
    }

    fn from_value(msg_type: MsgType, value: serde_json::Value) -> Result<Self> {
        fn de<T: DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::Codec(format!("bad payload: {e}")))
        }
        Ok(match msg_type {
            MsgType::ExperimentRequest => Payload::ExperimentRequest(de(value)?),
            MsgType::ExperimentAccepted => Payload::ExperimentAccepted(de(value)?),
            MsgType::ExperimentRejected => Payload::ExperimentRejected(de(value)?),
            MsgType::JobRequest => Payload::JobRequest(de(value)?),
            MsgType::JobAcknowledge => Payload::JobAcknowledge(de(value)?),
            MsgType::JobReply => Payload::JobReply(de(value)?),
            MsgType::JobFailed => Payload::JobFailed(de(value)?),
            MsgType::JobAbort => Payload::JobAbort(de(value)?),
            MsgType::ModelRequest => Payload::ModelRequest(de(value)?),
            MsgType::ModelReply => Payload::ModelReply(de(value)?),
            MsgType::StatusReport => Payload::StatusReport(de(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u32,
    pub experiment_id: String,
    pub round: u64,
    pub sender_id: String,
    pub sent_at: DateTime<Utc>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct RawEnvelope {
    version: u32,
    msg_type: MsgType,
    experiment_id: String,
    round: u64,
    sender_id: String,
    sent_at: DateTime<Utc>,
    payload: serde_json::Value,
}

/// Identifies a logical message across at-least-once redeliveries.
pub type DedupeKey = (String, u64, MsgType, String);

impl Envelope {
    pub fn new(sender_id: &str, experiment_id: &str, round: u64, payload: Payload) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            experiment_id: experiment_id.to_string(),
            round,
            sender_id: sender_id.to_string(),
            sent_at: Utc::now(),
            payload,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }

    pub fn dedupe_key(&self) -> DedupeKey {
        (
            self.experiment_id.clone(),
            self.round,
            self.msg_type(),
            self.sender_id.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw = RawEnvelope {
            version: self.version,
            msg_type: self.msg_type(),
            experiment_id: self.experiment_id.clone(),
            round: self.round,
            sender_id: self.sender_id.clone(),
            sent_at: self.sent_at,
            payload: self.payload.to_value()?,
        };
        let bytes = serde_json::to_vec(&raw)?;
        if bytes.len() > MAX_PAYLOAD_BYTES {
            return Err(Error::Codec(format!(
                "message of {} bytes exceeds the {MAX_PAYLOAD_BYTES} byte limit",
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() > MAX_PAYLOAD_BYTES {
            return Err(Error::Codec(format!(
                "message of {} bytes exceeds the {MAX_PAYLOAD_BYTES} byte limit",
                bytes.len()
            )));
        }
        let raw: RawEnvelope =
            serde_json::from_slice(bytes).map_err(|e| Error::Codec(format!("bad envelope: {e}")))?;
        if raw.version != PROTOCOL_VERSION {
            return Err(Error::Codec(format!("unsupported protocol version {}", raw.version)));
        }
        Ok(Self {
            version: raw.version,
            experiment_id: raw.experiment_id,
            round: raw.round,
            sender_id: raw.sender_id,
            sent_at: raw.sent_at,
            payload: Payload::from_value(raw.msg_type, raw.payload)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip() {
        let env = Envelope::new(
            "cn-1",
            "exp",
            4,
            Payload::JobFailed(JobFailed {
                reason: "loader".into(),
            }),
        );
        let bytes = env.to_bytes().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["msg_type"], "JobFailed");
        assert_eq!(v["round"], 4);
        assert_eq!(v["payload"]["reason"], "loader");
        assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env);
    }

    #[test]
    fn payload_must_match_type() {
        let raw = serde_json::json!({
            "version": 1, "msg_type": "JobFailed", "experiment_id": "e", "round": 1,
            "sender_id": "a", "sent_at": "2024-01-01T00:00:00Z", "payload": {}
        });
        assert!(Envelope::from_bytes(raw.to_string().as_bytes()).is_err());
    }

    #[test]
    fn rejects_other_versions() {
        let raw = serde_json::json!({
            "version": 9, "msg_type": "ModelRequest", "experiment_id": "e", "round": 0,
            "sender_id": "a", "sent_at": "2024-01-01T00:00:00Z", "payload": {}
        });
        assert!(Envelope::from_bytes(raw.to_string().as_bytes()).is_err());
    }

    #[test]
    fn status_state_names() {
        assert_eq!(serde_json::to_value(NodeState::Aggregating).unwrap(), "AGGREGATING");
    }
}
