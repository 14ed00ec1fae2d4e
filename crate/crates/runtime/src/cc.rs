//! Control center: submits experiments, watches the federation and fetches
//! final models.
//!
//! The view is built only from retained status reports and parameter server
//! replies, so a control center started late catches up from the broker.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, Utc};
use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use fedplat_core::protocol::codec::write_weight_file;
use fedplat_core::protocol::messages::{
    ExperimentRequest, ExperimentStatus, ModelReply, ModelRequest, NodeState, RejectionKind, RoundSummary,
    StatusReport, WeightedMetrics,
};
use fedplat_core::protocol::{NodeIdentity, Payload, Role, TopicFamily};
use fedplat_core::schema::{validate_experiment, ValidationIssue, ValidationReport};
use serde::Serialize;
use serde_json::Value;

use crate::artifacts::check_experiment_id;
use crate::link::{decode, Link, Watch};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CcConfig {
    /// Nodes expected in the federation; anything else reporting is flagged.
    pub known_nodes: Vec<NodeIdentity>,
    pub artifact_root: PathBuf,
    pub submit_timeout: Duration,
    pub model_timeout: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("invalid experiment: {} error(s)", .0.errors.len())]
    Invalid(ValidationReport),
    #[error("parameter server is busy")]
    Busy(Vec<ValidationIssue>),
    #[error("parameter server rejected the experiment")]
    Rejected(Vec<ValidationIssue>),
    #[error("parameter server unreachable")]
    Timeout,
    #[error(transparent)]
    Runtime(#[from] Error),
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown experiment {0}")]
    Unknown(String),
    #[error("experiment {0} is not finalized")]
    NotFinalized(String),
    #[error("{0}")]
    Remote(String),
    #[error("parameter server unreachable")]
    Timeout,
    #[error(transparent)]
    Runtime(#[from] Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub status: ExperimentStatus,
    pub algorithm: Option<String>,
    pub rounds_total: Option<u64>,
    pub rounds_done: u64,
    pub current_round: Option<u64>,
    pub last_metrics: Option<WeightedMetrics>,
    /// Round outcomes seen by this control center, one per round.
    pub rounds: Vec<RoundSummary>,
    pub final_round: Option<u64>,
    pub submitted_at: Option<DateTime<Utc>>,
    pub final_available: bool,
}

impl ExperimentSummary {
    fn new(experiment_id: &str) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            status: ExperimentStatus::Running,
            algorithm: None,
            rounds_total: None,
            rounds_done: 0,
            current_round: None,
            last_metrics: None,
            rounds: Vec::new(),
            final_round: None,
            submitted_at: None,
            final_available: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeView {
    pub client_id: String,
    /// Roster role, or `"unknown"` for nodes outside the roster.
    pub role: String,
    pub known: bool,
    /// Reporting but not in the roster.
    pub flagged: bool,
    pub state: Option<NodeState>,
    pub experiment_id: Option<String>,
    pub round: Option<u64>,
    pub last_seen: Option<DateTime<Utc>>,
    pub diagnostic: Option<String>,
    /// No report within three heartbeats, or never seen.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkView {
    pub nodes: Vec<NodeView>,
}

#[derive(Debug, Clone, Default)]
pub struct CcState {
    pub reports: BTreeMap<String, StatusReport>,
    pub experiments: BTreeMap<String, ExperimentSummary>,
}

pub type CcMonitor = Watch<CcState>;

enum PsAnswer {
    Accepted,
    Rejected(RejectionKind, Vec<ValidationIssue>),
}

struct Inner {
    link: Link,
    cfg: CcConfig,
    state: CcMonitor,
    submit_lock: Mutex<()>,
    model_lock: Mutex<()>,
    pending_submit: Mutex<HashMap<String, Sender<PsAnswer>>>,
    pending_model: Mutex<HashMap<String, Sender<ModelReply>>>,
}

pub struct ControlCenter {
    inner: Arc<Inner>,
    shutdown: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl ControlCenter {
    pub fn start(link: Link, cfg: CcConfig) -> Result<Arc<Self>> {
        let own = link.id().to_string();
        link.subscribe_family(TopicFamily::ParameterServerReplies, None)?;
        link.subscribe(&link.scheme().all_clients(TopicFamily::StatusReports))?;
        link.subscribe_family(TopicFamily::ModelReplies, Some(&own))?;
        let inner = Arc::new(Inner {
            link,
            cfg,
            state: CcMonitor::default(),
            submit_lock: Mutex::new(()),
            model_lock: Mutex::new(()),
            pending_submit: Mutex::new(HashMap::new()),
            pending_model: Mutex::new(HashMap::new()),
        });
        let shutdown = Arc::new(AtomicBool::new(false));
        let (i, flag) = (inner.clone(), shutdown.clone());
        let thread = std::thread::Builder::new()
            .name(format!("cc-{own}"))
            .spawn(move || consume(&i, &flag))?;
        Ok(Arc::new(Self {
            inner,
            shutdown,
            thread: Mutex::new(Some(thread)),
        }))
    }

    pub fn id(&self) -> &str {
        self.inner.link.id()
    }

    pub fn monitor(&self) -> CcMonitor {
        self.inner.state.clone()
    }

    pub fn artifact_root(&self) -> &Path {
        &self.inner.cfg.artifact_root
    }

    /// Validates locally, then sends the request under a fresh id and waits
    /// for the verdict.
    pub fn submit(&self, model_config: Value, settings: Value) -> std::result::Result<String, SubmitError> {
        self.submit_as(&uuid::Uuid::new_v4().to_string(), model_config, settings)
    }

    /// Like [`submit`](Self::submit) with a caller-chosen experiment id, for
    /// reproducible runs (the id seeds initialization and local shuffling).
    pub fn submit_as(
        &self,
        id: &str,
        model_config: Value,
        settings: Value,
    ) -> std::result::Result<String, SubmitError> {
        let mut report = validate_experiment(&model_config, &settings);
        if let Err(e) = check_experiment_id(id) {
            report.valid = false;
            report.errors.insert(0, ValidationIssue::new("experiment_id", e));
        }
        if !report.valid {
            return Err(SubmitError::Invalid(report));
        }
        let _one_at_a_time = self.inner.submit_lock.lock().unwrap();
        let id = id.to_string();
        let (tx, rx) = bounded(1);
        self.inner.pending_submit.lock().unwrap().insert(id.clone(), tx);
        let sent = self.inner.link.send(
            None,
            &id,
            0,
            Payload::ExperimentRequest(ExperimentRequest { model_config, settings }),
        );
        let answer = sent.map(|_| rx.recv_timeout(self.inner.cfg.submit_timeout));
        self.inner.pending_submit.lock().unwrap().remove(&id);
        match answer? {
            Ok(PsAnswer::Accepted) => {
                self.inner.state.update(|s| {
                    let e = s
                        .experiments
                        .entry(id.clone())
                        .or_insert_with(|| ExperimentSummary::new(&id));
                    e.submitted_at = Some(Utc::now());
                });
                Ok(id)
            }
            Ok(PsAnswer::Rejected(RejectionKind::Busy, errors)) => Err(SubmitError::Busy(errors)),
            Ok(PsAnswer::Rejected(RejectionKind::Invalid, errors)) => Err(SubmitError::Rejected(errors)),
            Err(_) => Err(SubmitError::Timeout),
        }
    }

    pub fn experiments(&self) -> Vec<ExperimentSummary> {
        self.inner.state.read(|s| s.experiments.values().cloned().collect())
    }

    pub fn experiment(&self, id: &str) -> Option<ExperimentSummary> {
        self.inner.state.read(|s| s.experiments.get(id).cloned())
    }

    /// Waits until the experiment's latest summary satisfies `pred`.
    pub fn wait_for(
        &self,
        id: &str,
        timeout: Duration,
        mut pred: impl FnMut(&ExperimentSummary) -> bool,
    ) -> Option<ExperimentSummary> {
        self.inner
            .state
            .wait_until(timeout, |s| s.experiments.get(id).is_some_and(&mut pred))
            .and_then(|s| s.experiments.get(id).cloned())
    }

    pub fn network(&self) -> NetworkView {
        network_view(&self.inner.cfg.known_nodes, &self.inner.state.snapshot().reports, Utc::now())
    }

    /// Requests the final model of `id` and writes it atomically to `dest`.
    /// Returns the source round.
    pub fn request_final_model(&self, id: &str, dest: &Path) -> std::result::Result<u64, ModelError> {
        check_experiment_id(id).map_err(|_| ModelError::Unknown(id.to_string()))?;
        let _one_at_a_time = self.inner.model_lock.lock().unwrap();
        let (tx, rx) = bounded(1);
        self.inner.pending_model.lock().unwrap().insert(id.to_string(), tx);
        let sent = self
            .inner
            .link
            .send_own(id, 0, Payload::ModelRequest(ModelRequest::default()));
        let answer = sent.map(|_| rx.recv_timeout(self.inner.cfg.model_timeout));
        self.inner.pending_model.lock().unwrap().remove(id);
        let reply = answer?.map_err(|_| ModelError::Timeout)?;
        if let Some(msg) = reply.error {
            return Err(classify_model_error(id, msg));
        }
        let weights = reply
            .weights
            .ok_or_else(|| ModelError::Remote("model reply without weights".into()))?
            .decode()
            .map_err(|e| ModelError::Remote(format!("undecodable model: {e}")))?;
        let round = reply.source_round.unwrap_or(0);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(Error::from)?;
        }
        let meta = serde_json::json!({ "experiment_id": id, "round": round, "model_config": reply.model_config });
        write_weight_file(dest, &weights, Some(meta)).map_err(Error::from)?;
        self.inner.state.update(|s| {
            if let Some(e) = s.experiments.get_mut(id) {
                e.final_available = true;
            }
        });
        Ok(round)
    }

    /// Fetches into `<root>/models/<id>.weights`.
    pub fn fetch_model_to_store(&self, id: &str) -> std::result::Result<PathBuf, ModelError> {
        let dest = self.inner.cfg.artifact_root.join("models").join(format!("{id}.weights"));
        self.request_final_model(id, &dest)?;
        Ok(dest)
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

impl Drop for ControlCenter {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn classify_model_error(id: &str, msg: String) -> ModelError {
    if msg.starts_with("unknown experiment") {
        ModelError::Unknown(id.to_string())
    } else if msg.ends_with("is not finalized") {
        ModelError::NotFinalized(id.to_string())
    } else {
        ModelError::Remote(msg)
    }
}

fn consume(inner: &Inner, shutdown: &AtomicBool) {
    let rx = inner.link.incoming();
    while !shutdown.load(Ordering::SeqCst) {
        let d = match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(d) => d,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let inbound = match decode(inner.link.scheme(), &d) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("cc: dropping message: {e}");
                continue;
            }
        };
        let env = inbound.env;
        match env.payload {
            Payload::ExperimentAccepted(_) => answer(inner, &env.experiment_id, PsAnswer::Accepted),
            Payload::ExperimentRejected(r) => {
                answer(inner, &env.experiment_id, PsAnswer::Rejected(r.kind, r.errors))
            }
            Payload::ModelReply(reply) => {
                if let Some(tx) = inner.pending_model.lock().unwrap().get(&env.experiment_id) {
                    let _ = tx.try_send(*reply);
                } else {
                    log::debug!("cc: unsolicited model reply for {}", env.experiment_id);
                }
            }
            Payload::StatusReport(report) => inner.state.update(|s| apply_report(s, *report)),
            other => log::warn!("cc: ignoring unexpected {:?}", other.msg_type()),
        }
    }
}

fn answer(inner: &Inner, id: &str, a: PsAnswer) {
    match inner.pending_submit.lock().unwrap().get(id) {
        Some(tx) => {
            let _ = tx.try_send(a);
        }
        None => log::debug!("cc: verdict for {id} that this control center did not submit"),
    }
}

fn apply_report(s: &mut CcState, report: StatusReport) {
    if let (Role::ParameterServer, Some(id), Some(p)) = (report.role, &report.experiment_id, &report.progress) {
        let e = s
            .experiments
            .entry(id.clone())
            .or_insert_with(|| ExperimentSummary::new(id));
        e.status = p.status;
        e.algorithm = Some(p.algorithm.clone());
        e.rounds_total = Some(p.rounds_total);
        e.rounds_done = p.rounds_done;
        e.current_round = (p.status == ExperimentStatus::Running && report.round > 0).then_some(report.round);
        e.final_round = p.final_round;
        if p.final_round.is_some() {
            e.final_available = true;
        }
        if let Some(last) = &p.last_round {
            if last.post_eval.is_some() {
                e.last_metrics = last.post_eval.clone();
            }
            match e.rounds.iter_mut().find(|r| r.round == last.round) {
                Some(r) => *r = last.clone(),
                None => {
                    e.rounds.push(last.clone());
                    e.rounds.sort_by_key(|r| r.round);
                }
            }
        }
    }
    s.reports.insert(report.client_id.clone(), report);
}

fn role_name(role: Role) -> String {
    match serde_json::to_value(role) {
        Ok(Value::String(s)) => s,
        _ => format!("{role:?}"),
    }
}

pub fn network_view(
    known: &[NodeIdentity],
    reports: &BTreeMap<String, StatusReport>,
    now: DateTime<Utc>,
) -> NetworkView {
    let mut nodes = Vec::new();
    for r in reports.values() {
        let age = now.signed_duration_since(r.timestamp).num_milliseconds().max(0) as u64;
        let roster = known.iter().find(|k| k.client_id == r.client_id);
        let is_known = roster.is_some();
        nodes.push(NodeView {
            client_id: r.client_id.clone(),
            role: roster.map_or_else(|| "unknown".to_string(), |k| role_name(k.role)),
            known: is_known,
            flagged: !is_known,
            state: Some(r.state),
            experiment_id: r.experiment_id.clone(),
            round: Some(r.round),
            last_seen: Some(r.timestamp),
            diagnostic: r.diagnostic.clone(),
            stale: age > 3 * r.heartbeat_ms,
        });
    }
    for k in known {
        if !reports.contains_key(&k.client_id) {
            nodes.push(NodeView {
                client_id: k.client_id.clone(),
                role: role_name(k.role),
                known: true,
                flagged: false,
                state: None,
                experiment_id: None,
                round: None,
                last_seen: None,
                diagnostic: None,
                stale: true,
            });
        }
    }
    nodes.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    NetworkView { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, role: Role, ts: DateTime<Utc>) -> StatusReport {
        StatusReport {
            client_id: id.into(),
            role,
            state: NodeState::Idle,
            experiment_id: None,
            round: 0,
            timestamp: ts,
            diagnostic: None,
            heartbeat_ms: 1000,
            progress: None,
        }
    }

    #[test]
    fn network_view_marks_stale_silent_and_unknown_nodes() {
        let now = Utc::now();
        let known = vec![
            NodeIdentity::new("ps", Role::ParameterServer),
            NodeIdentity::new("a", Role::ClientParticipant),
            NodeIdentity::new("b", Role::ClientParticipant),
        ];
        let mut reports = BTreeMap::new();
        reports.insert("ps".into(), report("ps", Role::ParameterServer, now));
        reports.insert("a".into(), report("a", Role::ClientParticipant, now - chrono::Duration::seconds(4)));
        reports.insert("x".into(), report("x", Role::ClientObserver, now));
        let v = network_view(&known, &reports, now);
        let by = |id: &str| v.nodes.iter().find(|n| n.client_id == id).unwrap().clone();
        assert_eq!(v.nodes.len(), 4);
        assert!(!by("ps").stale);
        assert!(by("a").stale);
        assert!(by("b").stale && by("b").last_seen.is_none());
        assert!(by("x").flagged && !by("x").known);
        assert_eq!(by("x").role, "unknown");
        assert_eq!(by("a").role, "client_participant");
    }

    #[test]
    fn model_errors_are_classified() {
        assert!(matches!(
            classify_model_error("e", "unknown experiment e".into()),
            ModelError::Unknown(_)
        ));
        assert!(matches!(
            classify_model_error("e", "experiment e is not finalized".into()),
            ModelError::NotFinalized(_)
        ));
        assert!(matches!(
            classify_model_error("e", "experiment e failed; no final model".into()),
            ModelError::Remote(_)
        ));
    }
}
