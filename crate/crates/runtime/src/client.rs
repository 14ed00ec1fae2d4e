//! Client nodes.
//!
//! A participant acknowledges a job request when idle, then evaluates the
//! received global model (optional), trains locally with the algorithm's
//! objective correction, evaluates the result (optional) and replies. Any
//! training or data failure produces a job failure message; evaluation
//! failures are tolerated and reported as diagnostics. A job abort for the
//! active round cancels training at the next batch boundary and nothing is
//! replied.
//!
//! Observers never receive jobs. Both roles store final models broadcast by
//! the parameter server, and observers evaluate them on their local data.
//!
//! The intake thread owns the subscriptions; jobs run on a worker thread.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;
use fedplat_core::algorithms::{finalize_client_update, make_modifier, ClientAlgState};
use fedplat_core::model::config::{fnv1a, ModelConfig};
use fedplat_core::model::data::Dataset;
use fedplat_core::model::metrics::{evaluate_until, EvalMetrics};
use fedplat_core::model::network::build_model;
use fedplat_core::model::train::{train_local, GradientModifier, Interrupt, StopSignal};
use fedplat_core::protocol::codec::{write_weight_file, WireWeights};
use fedplat_core::protocol::messages::{
    DedupeKey, JobAcknowledge, JobFailed, JobReply, JobRequest, ModelReply, ModelRequest, NodeState,
};
use fedplat_core::protocol::{Payload, Role, TopicFamily};
use fedplat_core::{DType, ModelWeights};
use serde::{Deserialize, Serialize};

use crate::artifacts::{append, check_experiment_id, experiment_dir, ExperimentStore};
use crate::data::DataLoader;
use crate::link::{decode, Inbound, Link, StatusReporter, Watch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Participant,
    Observer,
}

impl NodeRole {
    pub fn acl_role(self) -> Role {
        match self {
            NodeRole::Participant => Role::ClientParticipant,
            NodeRole::Observer => Role::ClientObserver,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub role: NodeRole,
    /// Overrides the experiment's consent default when set.
    pub allow_metrics_upload: Option<bool>,
    pub artifact_root: PathBuf,
    pub heartbeat: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplyNote {
    pub experiment_id: String,
    pub round: u64,
    pub completed_epochs: usize,
    pub steps: usize,
    pub interrupted: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ClientSnapshot {
    pub job_requests: u64,
    pub acks: u64,
    pub replies: u64,
    pub failures: u64,
    /// Jobs cancelled by an abort or superseded by a newer round.
    pub cancelled: u64,
    pub busy_ignored: u64,
    pub last_reply: Option<ReplyNote>,
    /// `(experiment_id, source round)` of every stored final model.
    pub models_stored: Vec<(String, u64)>,
    pub model_errors: Vec<(String, String)>,
    pub final_evals: Vec<(String, EvalMetrics)>,
}

pub type ClientMonitor = Watch<ClientSnapshot>;

struct ActiveJob {
    experiment_id: String,
    round: u64,
    cancel: Arc<AtomicBool>,
}

struct Shared {
    link: Link,
    cfg: ClientConfig,
    loader: Arc<dyn DataLoader>,
    status: StatusReporter,
    monitor: ClientMonitor,
    slot: Mutex<Option<ActiveJob>>,
    /// Algorithm state of the current experiment.
    alg: Mutex<Option<(String, ClientAlgState)>>,
}

pub struct ClientHandle {
    pub monitor: ClientMonitor,
    shared: Arc<Shared>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ClientHandle {
    pub fn id(&self) -> &str {
        self.shared.link.id()
    }

    /// Asks the parameter server for the final model of an experiment; the
    /// reply is handled like a broadcast final model.
    pub fn request_model(&self, experiment_id: &str) -> Result<()> {
        self.shared
            .link
            .send_own(experiment_id, 0, Payload::ModelRequest(ModelRequest::default()))
    }

    pub fn final_model_path(&self, experiment_id: &str) -> PathBuf {
        experiment_dir(&self.shared.cfg.artifact_root, experiment_id).join("final.weights")
    }

    pub fn artifact_root(&self) -> &std::path::Path {
        &self.shared.cfg.artifact_root
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(job) = self.shared.slot.lock().unwrap().as_ref() {
            job.cancel.store(true, Ordering::SeqCst);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ClientHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Loads local data (failing fast), subscribes and starts the intake thread.
pub fn start_client(link: Link, cfg: ClientConfig, loader: Arc<dyn DataLoader>) -> Result<ClientHandle> {
    let data = loader.load()?;
    match cfg.role {
        NodeRole::Participant if data.train.as_ref().is_none_or(|d| d.is_empty()) => {
            return Err(Error::Loader("a participant needs training data".into()));
        }
        NodeRole::Observer if data.eval.as_ref().is_none_or(|d| d.is_empty()) => {
            return Err(Error::Loader("an observer needs evaluation data".into()));
        }
        _ => {}
    }
    let own = link.id().to_string();
    if cfg.role == NodeRole::Participant {
        link.subscribe_family(TopicFamily::JobRequests, None)?;
    }
    link.subscribe_family(TopicFamily::ModelReplies, None)?;
    link.subscribe_family(TopicFamily::ModelReplies, Some(&own))?;

    let status = StatusReporter::new(link.clone(), cfg.role.acl_role(), cfg.heartbeat);
    status.publish_now();
    let shared = Arc::new(Shared {
        link,
        cfg,
        loader,
        status,
        monitor: ClientMonitor::default(),
        slot: Mutex::new(None),
        alg: Mutex::new(None),
    });
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut intake = Intake {
        shared: shared.clone(),
        worker: None,
        last_job: None,
        seen_models: HashSet::new(),
    };
    let flag = shutdown.clone();
    let thread = std::thread::Builder::new()
        .name(format!("cn-{own}"))
        .spawn(move || intake.run(&flag))
        .map_err(Error::Io)?;
    Ok(ClientHandle {
        monitor: shared.monitor.clone(),
        shared,
        shutdown,
        thread: Some(thread),
    })
}

struct Intake {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
    last_job: Option<(String, u64)>,
    seen_models: HashSet<DedupeKey>,
}

impl Intake {
    fn run(&mut self, shutdown: &AtomicBool) {
        let rx = self.shared.link.incoming();
        while !shutdown.load(Ordering::SeqCst) {
            let wait = self
                .shared
                .status
                .until_next(Instant::now())
                .min(Duration::from_millis(100));
            match rx.recv_timeout(wait) {
                Ok(d) => match decode(self.shared.link.scheme(), &d) {
                    Ok(inbound) => self.dispatch(inbound),
                    Err(e) => log::warn!("{}: dropping message: {e}", self.shared.link.id()),
                },
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            self.shared.status.beat(Instant::now());
        }
        if let Some(job) = self.shared.slot.lock().unwrap().as_ref() {
            job.cancel.store(true, Ordering::SeqCst);
        }
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }

    fn dispatch(&mut self, inbound: Inbound) {
        let env = inbound.env;
        let key = env.dedupe_key();
        match env.payload {
            Payload::JobRequest(job) => self.on_job_request(env.experiment_id, env.round, *job),
            Payload::JobAbort(abort) => {
                let slot = self.shared.slot.lock().unwrap();
                match slot.as_ref() {
                    Some(a) if a.experiment_id == env.experiment_id && a.round == env.round => {
                        log::info!(
                            "{}: aborting round {} ({})",
                            self.shared.link.id(),
                            env.round,
                            abort.reason
                        );
                        a.cancel.store(true, Ordering::SeqCst);
                    }
                    _ => log::debug!("{}: ignoring abort for round {}", self.shared.link.id(), env.round),
                }
            }
            Payload::ModelReply(reply) => self.on_model_reply(key, &env.experiment_id, *reply),
            other => log::warn!("{}: ignoring unexpected {:?}", self.shared.link.id(), other.msg_type()),
        }
    }

    fn on_job_request(&mut self, experiment_id: String, round: u64, job: JobRequest) {
        let s = &self.shared;
        s.monitor.update(|m| m.job_requests += 1);
        if s.cfg.role != NodeRole::Participant {
            log::warn!("{}: observer received a job request", s.link.id());
            return;
        }
        let key = (experiment_id.clone(), round);
        if self.last_job.as_ref() == Some(&key) {
            log::debug!("{}: duplicate job request for round {round}", s.link.id());
            return;
        }
        {
            let slot = s.slot.lock().unwrap();
            if let Some(active) = slot.as_ref() {
                if active.experiment_id == experiment_id && active.round < round {
                    // the server has moved on; the old round can no longer count
                    log::info!("{}: round {} superseded by round {round}", s.link.id(), active.round);
                    active.cancel.store(true, Ordering::SeqCst);
                } else {
                    log::info!(
                        "{}: busy with {} round {}, not acknowledging {experiment_id} round {round}",
                        s.link.id(),
                        active.experiment_id,
                        active.round
                    );
                    s.monitor.update(|m| m.busy_ignored += 1);
                    return;
                }
            }
        }
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        self.last_job = Some(key);
        if let Err(e) = s.link.send_own(&experiment_id, round, Payload::JobAcknowledge(JobAcknowledge::default())) {
            log::error!("{}: cannot acknowledge round {round}: {e}", s.link.id());
            return;
        }
        s.monitor.update(|m| m.acks += 1);
        let cancel = Arc::new(AtomicBool::new(false));
        *s.slot.lock().unwrap() = Some(ActiveJob {
            experiment_id: experiment_id.clone(),
            round,
            cancel: cancel.clone(),
        });
        s.status.set(NodeState::Training, Some(&experiment_id), round, None);
        let shared = self.shared.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("job-{}", s.link.id()))
            .spawn(move || run_job(&shared, &experiment_id, round, &job, &cancel));
        match spawned {
            Ok(h) => self.worker = Some(h),
            Err(e) => log::error!("cannot start job worker: {e}"),
        }
    }

    fn on_model_reply(&mut self, key: DedupeKey, experiment_id: &str, reply: ModelReply) {
        let s = &self.shared;
        let me = s.link.id().to_string();
        if let Some(err) = reply.error {
            log::warn!("{me}: model request for {experiment_id} failed: {err}");
            s.monitor
                .update(|m| m.model_errors.push((experiment_id.to_string(), err)));
            return;
        }
        if !self.seen_models.insert(key) {
            log::debug!("{me}: duplicate final model for {experiment_id}");
            return;
        }
        if let Err(e) = check_experiment_id(experiment_id) {
            log::warn!("{me}: refusing final model with experiment id {experiment_id:?}: {e}");
            return;
        }
        let Some(wire) = reply.weights else {
            log::warn!("{me}: final model reply without weights");
            return;
        };
        let weights = match wire.decode() {
            Ok(w) => w,
            Err(e) => {
                log::warn!("{me}: undecodable final model for {experiment_id}: {e}");
                return;
            }
        };
        let round = reply.source_round.unwrap_or(0);
        let dir = experiment_dir(&s.cfg.artifact_root, experiment_id);
        let path = dir.join("final.weights");
        if let Err(e) = std::fs::create_dir_all(&dir)
            .map_err(Error::from)
            .and_then(|_| Ok(write_weight_file(&path, &weights, Some(serde_json::json!({ "round": round })))?))
        {
            log::error!("{me}: cannot store final model: {e}");
            return;
        }
        s.monitor
            .update(|m| m.models_stored.push((experiment_id.to_string(), round)));
        if s.cfg.role != NodeRole::Observer {
            return;
        }
        let Some(cfg) = reply.model_config else {
            log::warn!("{me}: final model without a model config; not evaluated");
            return;
        };
        let eval = s.loader.load().ok().and_then(|d| d.eval);
        let Some(eval) = eval else {
            log::warn!("{me}: no evaluation data for the final model");
            return;
        };
        match evaluate_until(&cfg, &weights.to_dtype(DType::F64), &eval, 0.5, None) {
            Ok(metrics) => {
                let record = serde_json::json!({
                    "kind": "final_model",
                    "source_round": round,
                    "metrics": metrics,
                });
                let line = format!("{record}\n");
                if let Err(e) = append(&dir.join("metrics.jsonl"), line.as_bytes()) {
                    log::error!("{me}: cannot record final evaluation: {e}");
                }
                s.monitor
                    .update(|m| m.final_evals.push((experiment_id.to_string(), metrics)));
            }
            Err(e) => log::warn!("{me}: final model evaluation failed: {e}"),
        }
    }
}

enum JobError {
    Cancelled,
    Failed(String),
}

impl<E: std::fmt::Display> From<E> for JobError {
    fn from(e: E) -> Self {
        JobError::Failed(e.to_string())
    }
}

struct JobResult {
    reply: JobReply,
    next_state: ClientAlgState,
    local: serde_json::Value,
    weights: ModelWeights,
}

fn run_job(s: &Arc<Shared>, experiment_id: &str, round: u64, job: &JobRequest, cancel: &Arc<AtomicBool>) {
    let result = execute(s, experiment_id, round, job, cancel);
    let mut slot = s.slot.lock().unwrap();
    let mine = slot
        .as_ref()
        .is_some_and(|a| a.experiment_id == experiment_id && a.round == round);
    if cancel.load(Ordering::SeqCst) || !mine {
        if mine {
            *slot = None;
            s.status.set(NodeState::Idle, Some(experiment_id), round, None);
        }
        drop(slot);
        log::info!("{}: round {round} cancelled, no reply", s.link.id());
        s.monitor.update(|m| m.cancelled += 1);
        return;
    }
    *slot = None;
    match result {
        Ok(done) => {
            *s.alg.lock().unwrap() = Some((experiment_id.to_string(), done.next_state));
            s.status.set(NodeState::Idle, Some(experiment_id), round, None);
            let note = ReplyNote {
                experiment_id: experiment_id.to_string(),
                round,
                completed_epochs: done.reply.completed_epochs,
                steps: done.reply.steps,
                interrupted: done.reply.interrupted,
            };
            match s.link.send_own(experiment_id, round, Payload::JobReply(Box::new(done.reply))) {
                Ok(()) => s.monitor.update(|m| {
                    m.replies += 1;
                    m.last_reply = Some(note);
                }),
                Err(e) => log::error!("{}: cannot send reply for round {round}: {e}", s.link.id()),
            }
            drop(slot);
            store_local(s, experiment_id, round, &done.weights, &done.local);
        }
        Err(JobError::Cancelled) => {
            s.status.set(NodeState::Idle, Some(experiment_id), round, None);
            s.monitor.update(|m| m.cancelled += 1);
        }
        Err(JobError::Failed(reason)) => {
            log::warn!("{}: round {round} failed: {reason}", s.link.id());
            s.status
                .set(NodeState::Idle, Some(experiment_id), round, Some(reason.clone()));
            if let Err(e) = s
                .link
                .send_own(experiment_id, round, Payload::JobFailed(JobFailed { reason }))
            {
                log::error!("{}: cannot report failure: {e}", s.link.id());
            }
            s.monitor.update(|m| m.failures += 1);
        }
    }
}

fn store_local(s: &Shared, experiment_id: &str, round: u64, weights: &ModelWeights, record: &serde_json::Value) {
    let stored = ExperimentStore::create(&s.cfg.artifact_root, experiment_id, 0).and_then(|store| {
        store.write_client(s.link.id(), weights, round)?;
        store.append_metrics(record)
    });
    if let Err(e) = stored {
        log::warn!("{}: cannot store local artifacts: {e}", s.link.id());
    }
}

/// Per-node, per-round seed so nodes and rounds draw different batches.
fn job_seed(base: u64, client_id: &str, experiment_id: &str, round: u64) -> u64 {
    fnv1a(format!("{base}/{client_id}/{experiment_id}/{round}").as_bytes())
}

fn evaluate_step(
    cfg: &ModelConfig,
    w: &ModelWeights,
    eval: Option<&Dataset>,
    threshold: f64,
    timeout: Duration,
    label: &str,
    errors: &mut Vec<String>,
) -> Option<EvalMetrics> {
    let Some(eval) = eval else {
        errors.push(format!("{label}: no evaluation data"));
        return None;
    };
    match evaluate_until(cfg, w, eval, threshold, Some(Instant::now() + timeout)) {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("{label}: {e}"));
            None
        }
    }
}

fn execute(
    s: &Shared,
    experiment_id: &str,
    round: u64,
    job: &JobRequest,
    cancel: &Arc<AtomicBool>,
) -> std::result::Result<JobResult, JobError> {
    let data = s
        .loader
        .load()
        .map_err(|e| JobError::Failed(format!("data loader failed: {e}")))?;
    let train = data
        .train
        .clone()
        .ok_or_else(|| JobError::Failed("no training data".into()))?;
    let cfg = &job.model_config;
    cfg.validate()?;
    if cfg.input_dim != train.n_features() {
        return Err(JobError::Failed(format!(
            "model expects {} features, local data has {}",
            cfg.input_dim,
            train.n_features()
        )));
    }
    let received = job.weights.decode()?;
    let wire = received.dtype().unwrap_or(DType::F64);
    let global = received.to_dtype(DType::F64);
    global.check_compatible(&build_model(cfg, 0)?)?;
    let server_control = match &job.server_control {
        Some(c) => Some(c.decode()?.to_dtype(DType::F64)),
        None => None,
    };
    let state = match s.alg.lock().unwrap().as_ref() {
        Some((exp, st)) if exp == experiment_id => st.clone(),
        _ => ClientAlgState::new(&global),
    };
    let eval_timeout = Duration::from_millis(job.eval_timeout_ms);
    let threshold = job.training.class_threshold;
    let mut eval_errors = Vec::new();

    let pre = if job.pre_eval {
        s.status.set(NodeState::Evaluating, Some(experiment_id), round, None);
        evaluate_step(cfg, &global, data.eval.as_deref(), threshold, eval_timeout, "pre-evaluation", &mut eval_errors)
    } else {
        None
    };
    if cancel.load(Ordering::SeqCst) {
        return Err(JobError::Cancelled);
    }

    s.status.set(NodeState::Training, Some(experiment_id), round, None);
    let modifier = make_modifier(&job.algorithm, &global, server_control.as_ref(), &state)?;
    let modifier: Option<&dyn GradientModifier> = if modifier.is_identity() { None } else { Some(&modifier) };
    let mut settings = job.training.clone();
    settings.rng_seed = job_seed(job.training.rng_seed, s.link.id(), experiment_id, round);
    let stop = StopSignal {
        deadline: Some(Instant::now() + Duration::from_millis(job.train_timeout_ms)),
        cancel: Some(cancel.clone()),
    };
    let out = train_local(cfg, &global, &train, &settings, modifier, &stop)
        .map_err(|e| JobError::Failed(format!("local training failed: {e}")))?;
    if out.interrupted == Some(Interrupt::Cancelled) {
        return Err(JobError::Cancelled);
    }
    if out.weights.flatten_f64().iter().any(|v| !v.is_finite()) {
        return Err(JobError::Failed("local training produced non-finite weights".into()));
    }

    let post = if job.post_eval {
        s.status.set(NodeState::Evaluating, Some(experiment_id), round, None);
        evaluate_step(cfg, &out.weights, data.eval.as_deref(), threshold, eval_timeout, "post-evaluation", &mut eval_errors)
    } else {
        None
    };
    if cancel.load(Ordering::SeqCst) {
        return Err(JobError::Cancelled);
    }

    let (delta_c, next_state) = finalize_client_update(
        &job.algorithm,
        &global,
        &out.weights,
        server_control.as_ref(),
        &state,
        out.steps,
    )?;
    let allow = s.cfg.allow_metrics_upload.unwrap_or(job.allow_metrics_upload_default);
    let local = serde_json::json!({
        "round": round,
        "completed_epochs": out.completed_epochs,
        "steps": out.steps,
        "interrupted": out.interrupted.is_some(),
        "epoch_losses": out.history,
        "pre_eval": pre,
        "post_eval": post,
        "eval_errors": eval_errors,
    });
    let reply = JobReply {
        weights: WireWeights::encode(&out.weights.to_dtype(wire)),
        n_train_samples: train.len(),
        completed_epochs: out.completed_epochs,
        steps: out.steps,
        interrupted: out.interrupted.is_some(),
        delta_c: delta_c.map(|d| WireWeights::encode(&d.to_dtype(wire))),
        pre_eval: if allow { pre } else { None },
        post_eval: if allow { post } else { None },
        metrics_withheld: !allow,
        eval_errors,
    };
    Ok(JobResult {
        reply,
        next_state,
        local,
        weights: out.weights,
    })
}
