//! The parameter server.
//!
//! One experiment runs at a time. Each round broadcasts a job request, waits
//! for acknowledgments until the ack timeout (or until every participant has
//! acknowledged), then waits for replies until the reply deadline measured from
//! the broadcast. A round is skipped when too few nodes acknowledge (a job
//! abort is broadcast) or when too few replies can still arrive. Aggregated
//! rounds feed the weighted post-evaluation loss to the plateau and
//! early-stopping controllers.
//!
//! All state transitions happen on one thread: [`ParameterServer::handle`] for
//! deliveries and [`ParameterServer::poll`] for deadlines. [`ParameterServer::spawn`]
//! drives both from the transport.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;
use fedplat_core::algorithms::scheduler::{early_stop_step, plateau_step, SchedulerState};
use fedplat_core::algorithms::{aggregate, weighted_metric_mean, AlgorithmKind, ClientUpdate, ServerAggState};
use fedplat_core::model::config::ModelConfig;
use fedplat_core::model::metrics::EvalMetrics;
use fedplat_core::model::network::build_model;
use fedplat_core::protocol::codec::{decode_weight_file, WireWeights};
use fedplat_core::protocol::messages::{
    ExperimentAccepted, ExperimentProgress, ExperimentRejected, ExperimentStatus, JobAbort, JobReply, JobRequest,
    ModelReply, NodeState, RejectionKind, RoundOutcomeKind, RoundSummary, WeightedMetrics,
};
use fedplat_core::protocol::{Delivery, Envelope, MsgType, Payload, Role, TopicFamily};
use fedplat_core::schema::{federation_issues, parse_documents, ExperimentSpec, ValidationIssue};
use fedplat_core::{DType, ModelWeights};
use serde::Serialize;

use crate::artifacts::{check_experiment_id, experiment_dir, final_model_path, ExperimentStore};
use crate::link::{decode, Inbound, Link, StatusReporter, Watch};
use crate::Result;

#[derive(Debug, Clone)]
pub struct PsConfig {
    /// Registered participant client ids.
    pub participants: Vec<String>,
    pub observers: Vec<String>,
    pub artifact_root: PathBuf,
    pub heartbeat: Duration,
}

/// What the server has done with one experiment, for tests and operators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub experiment_id: String,
    pub status: ExperimentStatus,
    pub algorithm: AlgorithmKind,
    pub rounds_total: u64,
    pub rounds: Vec<RoundSummary>,
    pub final_round: Option<u64>,
    pub diagnostic: Option<String>,
    pub job_aborts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaleMessage {
    pub sender: String,
    pub experiment_id: String,
    pub round: u64,
    pub msg_type: MsgType,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PsSnapshot {
    pub current: Option<String>,
    pub experiments: BTreeMap<String, ExperimentRecord>,
    pub stale: Vec<StaleMessage>,
    pub rejected_requests: u64,
}

/// Shared, read-only view of the server's progress.
pub type PsMonitor = Watch<PsSnapshot>;

impl Watch<PsSnapshot> {
    pub fn record(&self, experiment_id: &str) -> Option<ExperimentRecord> {
        self.read(|s| s.experiments.get(experiment_id).cloned())
    }

    pub fn wait_finished(&self, experiment_id: &str, timeout: Duration) -> Option<ExperimentRecord> {
        self.wait_until(timeout, |s| {
            s.experiments
                .get(experiment_id)
                .is_some_and(|r| r.status.is_finished())
        })
        .and_then(|s| s.experiments.get(experiment_id).cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitingAcks,
    AwaitingReplies,
}

struct RoundState {
    round: u64,
    phase: Phase,
    learning_rate: f64,
    acks: BTreeSet<String>,
    replies: BTreeMap<String, JobReply>,
    failures: BTreeMap<String, String>,
    ack_deadline: Instant,
    reply_deadline: Instant,
}

struct Running {
    spec: ExperimentSpec,
    store: ExperimentStore,
    /// Always `f64`; converted to the wire type when sent or stored.
    global: ModelWeights,
    agg: ServerAggState,
    sched: SchedulerState,
    best: Option<(u64, ModelWeights)>,
    last_aggregated: Option<u64>,
    summaries: Vec<RoundSummary>,
    round: Option<RoundState>,
    job_aborts: u64,
}

struct Finished {
    model_config: ModelConfig,
    model: Option<(u64, ModelWeights)>,
}

enum Decision {
    Wait,
    SkipAcks,
    SkipReplies(&'static str),
    Aggregate,
}

enum Step {
    Continue,
    Finish(ExperimentStatus),
}

/// The parameter server state machine.
pub struct ParameterServer {
    link: Link,
    cfg: PsConfig,
    status: StatusReporter,
    monitor: PsMonitor,
    running: Option<Running>,
    finished: HashMap<String, Finished>,
}

/// Handle to a server running on its own thread.
pub struct PsHandle {
    pub monitor: PsMonitor,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl PsHandle {
    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PsHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl ParameterServer {
    /// Subscribes to the server's topics and publishes an initial status.
    pub fn new(link: Link, cfg: PsConfig) -> Result<Self> {
        let status = StatusReporter::new(link.clone(), Role::ParameterServer, cfg.heartbeat);
        link.subscribe_family(TopicFamily::ControlCenter, None)?;
        link.subscribe(&link.scheme().all_clients(TopicFamily::JobReplies))?;
        link.subscribe(&link.scheme().all_clients(TopicFamily::ModelRequests))?;
        status.publish_now();
        Ok(Self {
            link,
            cfg,
            status,
            monitor: PsMonitor::default(),
            running: None,
            finished: HashMap::new(),
        })
    }

    pub fn monitor(&self) -> PsMonitor {
        self.monitor.clone()
    }

    pub fn spawn(mut self) -> PsHandle {
        let shutdown = Arc::new(AtomicBool::new(false));
        let monitor = self.monitor();
        let flag = shutdown.clone();
        let thread = std::thread::Builder::new()
            .name(format!("ps-{}", self.link.id()))
            .spawn(move || self.run(&flag))
            .expect("spawn parameter server thread");
        PsHandle {
            monitor,
            shutdown,
            thread: Some(thread),
        }
    }

    /// Serves until `shutdown` is set or the transport closes.
    pub fn run(&mut self, shutdown: &AtomicBool) {
        let rx = self.link.incoming();
        while !shutdown.load(Ordering::SeqCst) {
            let now = Instant::now();
            let mut wait = self.status.until_next(now).min(Duration::from_millis(100));
            if let Some(d) = self.next_deadline() {
                wait = wait.min(d.saturating_duration_since(now));
            }
            match rx.recv_timeout(wait) {
                Ok(d) => self.handle(&d, Instant::now()),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            let now = Instant::now();
            self.poll(now);
            self.status.beat(now);
        }
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        let r = self.running.as_ref()?.round.as_ref()?;
        Some(match r.phase {
            Phase::AwaitingAcks => r.ack_deadline,
            Phase::AwaitingReplies => r.reply_deadline,
        })
    }

    pub fn handle(&mut self, d: &Delivery, now: Instant) {
        let inbound = match decode(self.link.scheme(), d) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("ps: dropping message: {e}");
                return;
            }
        };
        match &inbound.env.payload {
            Payload::ExperimentRequest(_) => self.on_experiment_request(&inbound.env, now),
            Payload::JobAcknowledge(_) | Payload::JobReply(_) | Payload::JobFailed(_) => {
                self.on_job_message(inbound, now)
            }
            Payload::ModelRequest(_) => self.on_model_request(&inbound),
            other => log::warn!(
                "ps: ignoring unexpected {:?} from {}",
                other.msg_type(),
                inbound.env.sender_id
            ),
        }
    }

    /// Fires expired deadlines.
    pub fn poll(&mut self, now: Instant) {
        self.advance(now);
    }

    // -- experiment requests ------------------------------------------------

    fn on_experiment_request(&mut self, env: &Envelope, now: Instant) {
        let Payload::ExperimentRequest(req) = &env.payload else {
            return;
        };
        let id = env.experiment_id.clone();
        if let Some(run) = &self.running {
            let issue = ValidationIssue::new(
                "experiment_id",
                format!("parameter server is busy with experiment {}", run.spec.experiment_id),
            );
            self.reject(&id, RejectionKind::Busy, vec![issue]);
            return;
        }
        let mut errors = Vec::new();
        if let Err(msg) = check_experiment_id(&id) {
            errors.push(ValidationIssue::new("experiment_id", msg));
        } else if self.finished.contains_key(&id) || experiment_dir(&self.cfg.artifact_root, &id).exists() {
            errors.push(ValidationIssue::new("experiment_id", "already used"));
        }
        let parsed = match parse_documents(&req.model_config, &req.settings) {
            Ok((cfg, settings)) => {
                errors.extend(federation_issues(&settings, self.cfg.participants.len()));
                Some((cfg, settings))
            }
            Err(report) => {
                errors.extend(report.errors);
                None
            }
        };
        let Some((model_config, settings)) = parsed.filter(|_| errors.is_empty()) else {
            errors.sort();
            self.reject(&id, RejectionKind::Invalid, errors);
            return;
        };
        let spec = ExperimentSpec {
            experiment_id: id.clone(),
            model_config,
            settings,
        };
        match self.begin(spec) {
            Ok(run) => {
                log::info!("ps: experiment {id} accepted");
                if let Err(e) = self.link.send(
                    None,
                    &id,
                    0,
                    Payload::ExperimentAccepted(ExperimentAccepted::default()),
                ) {
                    log::error!("ps: cannot confirm experiment {id}: {e}");
                }
                self.monitor.update(|s| {
                    s.current = Some(id.clone());
                    s.experiments.insert(id.clone(), run.record(ExperimentStatus::Running, None));
                });
                self.running = Some(run);
                match self.start_round(now) {
                    Ok(()) => self.advance(now),
                    Err(e) => self.fail(format!("cannot start round 1: {e}")),
                }
            }
            Err(e) => {
                let issue = ValidationIssue::new("", format!("parameter server cannot start the experiment: {e}"));
                self.reject(&id, RejectionKind::Invalid, vec![issue]);
            }
        }
    }

    fn reject(&self, id: &str, kind: RejectionKind, errors: Vec<ValidationIssue>) {
        log::info!("ps: experiment {id} rejected ({kind:?}): {errors:?}");
        self.monitor.update(|s| s.rejected_requests += 1);
        let payload = Payload::ExperimentRejected(ExperimentRejected { kind, errors });
        if let Err(e) = self.link.send(None, id, 0, payload) {
            log::error!("ps: cannot send rejection for {id}: {e}");
        }
    }

    fn begin(&self, spec: ExperimentSpec) -> Result<Running> {
        let seed = spec.model_config.seed_policy.resolve(&spec.experiment_id);
        let global = build_model(&spec.model_config, seed)?;
        let process = &spec.settings.process;
        let store = ExperimentStore::create(&self.cfg.artifact_root, &spec.experiment_id, process.keep_rounds)?;
        store.write_json("spec.json", &spec)?;
        store.event(&format!(
            "experiment accepted: {} rounds of {} with {} participant(s), init seed {seed}",
            process.rounds,
            spec.settings.algorithm.kind.name(),
            self.cfg.participants.len()
        ))?;
        let sched = SchedulerState::new(&process.scheduler_config(spec.settings.training.learning_rate));
        Ok(Running {
            agg: ServerAggState::new(&global, self.cfg.participants.len()),
            global,
            sched,
            best: None,
            last_aggregated: None,
            summaries: Vec::new(),
            round: None,
            store,
            spec,
            job_aborts: 0,
        })
    }

    // -- rounds --------------------------------------------------------------

    fn start_round(&mut self, now: Instant) -> Result<()> {
        let run = self.running.as_mut().expect("running experiment");
        let process = &run.spec.settings.process;
        let round = run.round.as_ref().map_or(1, |r| r.round + 1);
        let wire = process.wire_dtype;
        let mut training = run.spec.settings.training.clone();
        training.learning_rate = run.sched.current_lr;
        let server_control = (run.spec.settings.algorithm.kind == AlgorithmKind::Scaffold)
            .then(|| WireWeights::encode(&run.agg.scaffold_c.to_dtype(wire)));
        let job = JobRequest {
            model_config: run.spec.model_config.clone(),
            training,
            algorithm: run.spec.settings.algorithm.clone(),
            weights: WireWeights::encode(&run.global.to_dtype(wire)),
            server_control,
            pre_eval: process.pre_eval,
            post_eval: process.post_eval,
            train_timeout_ms: process.train_timeout().as_millis() as u64,
            eval_timeout_ms: process.eval_timeout().as_millis() as u64,
            allow_metrics_upload_default: process.allow_metrics_upload_default,
        };
        run.round = Some(RoundState {
            round,
            phase: Phase::AwaitingAcks,
            learning_rate: run.sched.current_lr,
            acks: BTreeSet::new(),
            replies: BTreeMap::new(),
            failures: BTreeMap::new(),
            ack_deadline: now + process.ack_timeout(),
            reply_deadline: now + process.reply_window(),
        });
        let id = run.spec.experiment_id.clone();
        run.store.event(&format!("round {round}: job request broadcast"))?;
        self.link.send(None, &id, round, Payload::JobRequest(Box::new(job)))?;
        let progress = run.progress(ExperimentStatus::Running, None);
        self.status
            .set_with_progress(NodeState::Waiting, Some(&id), round, None, Some(progress));
        Ok(())
    }

    fn on_job_message(&mut self, inbound: Inbound, now: Instant) {
        let env = &inbound.env;
        let sender = env.sender_id.clone();
        let current = self
            .running
            .as_ref()
            .and_then(|r| r.round.as_ref().map(|rs| (r.spec.experiment_id.as_str(), rs.round)));
        if current != Some((env.experiment_id.as_str(), env.round)) {
            self.note_stale(env);
            return;
        }
        if !self.cfg.participants.contains(&sender) {
            log::warn!("ps: ignoring {:?} from unregistered node {sender}", env.msg_type());
            return;
        }
        let run = self.running.as_mut().expect("running experiment");
        let rs = run.round.as_mut().expect("round in progress");
        match &inbound.env.payload {
            Payload::JobAcknowledge(_) => {
                rs.acks.insert(sender);
            }
            Payload::JobFailed(f) => {
                log::info!("ps: round {} job failed on {sender}: {}", rs.round, f.reason);
                let _ = run
                    .store
                    .event(&format!("round {}: job failed on {sender}: {}", rs.round, f.reason));
                rs.acks.insert(sender.clone());
                rs.replies.remove(&sender);
                rs.failures.insert(sender, f.reason.clone());
            }
            Payload::JobReply(reply) => {
                if rs.failures.contains_key(&sender) || rs.replies.contains_key(&sender) {
                    log::debug!("ps: duplicate reply from {sender} for round {}", rs.round);
                } else {
                    rs.acks.insert(sender.clone());
                    rs.replies.insert(sender, (**reply).clone());
                }
            }
            _ => unreachable!(),
        }
        self.advance(now);
    }

    fn note_stale(&mut self, env: &Envelope) {
        log::info!(
            "ps: stale {:?} from {} for experiment {} round {}",
            env.msg_type(),
            env.sender_id,
            env.experiment_id,
            env.round
        );
        if let Some(run) = &self.running {
            let _ = run.store.event(&format!(
                "stale {:?} from {} ignored (experiment {}, round {})",
                env.msg_type(),
                env.sender_id,
                env.experiment_id,
                env.round
            ));
        }
        let note = StaleMessage {
            sender: env.sender_id.clone(),
            experiment_id: env.experiment_id.clone(),
            round: env.round,
            msg_type: env.msg_type(),
        };
        self.monitor.update(|s| s.stale.push(note));
    }

    /// Applies every transition that is due, possibly across several rounds.
    fn advance(&mut self, now: Instant) {
        loop {
            let outcome = match self.decide(now) {
                Decision::Wait => return,
                Decision::SkipAcks => self.skip_for_acks(),
                Decision::SkipReplies(why) => self.skip_for_replies(why),
                Decision::Aggregate => self.aggregate_round(),
            };
            if !self.after_round(outcome, now) {
                return;
            }
        }
    }

    fn decide(&mut self, now: Instant) -> Decision {
        let n_participants = self.cfg.participants.len();
        let Some(run) = self.running.as_mut() else {
            return Decision::Wait;
        };
        let min = run.spec.settings.process.min_replies;
        let Some(rs) = run.round.as_mut() else {
            return Decision::Wait;
        };
        if rs.phase == Phase::AwaitingAcks {
            let everyone = rs.acks.len() >= n_participants;
            if !everyone && now < rs.ack_deadline {
                return Decision::Wait;
            }
            if rs.acks.len() < min {
                return Decision::SkipAcks;
            }
            rs.phase = Phase::AwaitingReplies;
        }
        let failed = rs.failures.keys().filter(|c| rs.acks.contains(*c)).count();
        let possible = rs.acks.len() - failed;
        if possible < min {
            Decision::SkipReplies("too many failures")
        } else if rs.replies.len() >= possible {
            Decision::Aggregate
        } else if now >= rs.reply_deadline {
            if rs.replies.len() >= min {
                Decision::Aggregate
            } else {
                Decision::SkipReplies("reply deadline passed")
            }
        } else {
            Decision::Wait
        }
    }

    /// Returns whether a new round was started.
    fn after_round(&mut self, outcome: std::result::Result<Step, String>, now: Instant) -> bool {
        match outcome {
            Err(diag) => {
                self.fail(diag);
                false
            }
            Ok(Step::Finish(status)) => {
                self.finish(status);
                false
            }
            Ok(Step::Continue) => {
                let run = self.running.as_ref().expect("running experiment");
                let done = run.round.as_ref().map_or(0, |r| r.round);
                if done >= run.spec.settings.process.rounds {
                    self.finish(ExperimentStatus::Completed);
                    return false;
                }
                match self.start_round(now) {
                    Ok(()) => true,
                    Err(e) => {
                        self.fail(format!("cannot start round {}: {e}", done + 1));
                        false
                    }
                }
            }
        }
    }

    fn skip_for_acks(&mut self) -> std::result::Result<Step, String> {
        let run = self.running.as_mut().expect("running experiment");
        let rs = run.round.as_ref().expect("round in progress");
        let id = run.spec.experiment_id.clone();
        let reason = format!(
            "{} of {} required acknowledgments",
            rs.acks.len(),
            run.spec.settings.process.min_replies
        );
        self.link
            .send(None, &id, rs.round, Payload::JobAbort(JobAbort { reason: reason.clone() }))
            .map_err(|e| format!("cannot broadcast job abort: {e}"))?;
        run.job_aborts += 1;
        run.store
            .event(&format!("round {} skipped: insufficient acks ({reason}); job abort broadcast", rs.round))
            .map_err(|e| e.to_string())?;
        let summary = RoundSummary {
            round: rs.round,
            outcome: RoundOutcomeKind::SkippedAcks,
            participants: rs.acks.iter().cloned().collect(),
            post_eval: None,
            pre_eval: None,
            learning_rate: rs.learning_rate,
        };
        self.record_round(summary, serde_json::Map::new())
    }

    fn skip_for_replies(&mut self, why: &str) -> std::result::Result<Step, String> {
        let run = self.running.as_mut().expect("running experiment");
        let rs = run.round.as_ref().expect("round in progress");
        run.store
            .event(&format!(
                "round {} skipped: insufficient replies ({why}: {} replies, {} failures, {} acks, {} required)",
                rs.round,
                rs.replies.len(),
                rs.failures.len(),
                rs.acks.len(),
                run.spec.settings.process.min_replies
            ))
            .map_err(|e| e.to_string())?;
        let summary = RoundSummary {
            round: rs.round,
            outcome: RoundOutcomeKind::SkippedReplies,
            participants: rs.replies.keys().cloned().collect(),
            post_eval: None,
            pre_eval: None,
            learning_rate: rs.learning_rate,
        };
        self.record_round(summary, serde_json::Map::new())
    }

    fn aggregate_round(&mut self) -> std::result::Result<Step, String> {
        let run = self.running.as_mut().expect("running experiment");
        let rs = run.round.as_ref().expect("round in progress");
        let round = rs.round;
        let id = run.spec.experiment_id.clone();
        let progress = run.progress(ExperimentStatus::Running, None);
        self.status
            .set_with_progress(NodeState::Aggregating, Some(&id), round, None, Some(progress));

        let mut updates = Vec::with_capacity(rs.replies.len());
        let mut per_client = serde_json::Map::new();
        for (cid, reply) in &rs.replies {
            let weights = reply
                .weights
                .decode()
                .map_err(|e| format!("undecodable weights from {cid}: {e}"))?
                .to_dtype(DType::F64);
            let delta_c = match &reply.delta_c {
                Some(w) => Some(
                    w.decode()
                        .map_err(|e| format!("undecodable control delta from {cid}: {e}"))?
                        .to_dtype(DType::F64),
                ),
                None => None,
            };
            let mut entry = serde_json::json!({
                "n_train_samples": reply.n_train_samples,
                "completed_epochs": reply.completed_epochs,
                "steps": reply.steps,
                "interrupted": reply.interrupted,
            });
            if reply.metrics_withheld {
                entry["metrics_withheld"] = true.into();
            } else {
                if let Some(m) = &reply.pre_eval {
                    entry["pre_eval"] = serde_json::to_value(m).unwrap_or_default();
                }
                if let Some(m) = &reply.post_eval {
                    entry["post_eval"] = serde_json::to_value(m).unwrap_or_default();
                }
            }
            if !reply.eval_errors.is_empty() {
                entry["eval_errors"] = serde_json::to_value(&reply.eval_errors).unwrap_or_default();
            }
            per_client.insert(cid.clone(), entry);
            updates.push(ClientUpdate {
                client_id: cid.clone(),
                new_weights: weights,
                n_train_samples: reply.n_train_samples,
                delta_c,
                post_eval: reply.post_eval.clone(),
                pre_eval: reply.pre_eval.clone(),
            });
        }

        let (global, agg) = aggregate(&run.spec.settings.algorithm, &run.global, &updates, &run.agg)
            .map_err(|e| format!("round {round}: aggregation failed: {e}"))?;
        run.global = global;
        run.agg = agg;
        run.last_aggregated = Some(round);

        let wire = run.spec.settings.process.wire_dtype;
        let stored = run.global.to_dtype(wire);
        run.store.write_global(round, &stored).map_err(|e| e.to_string())?;
        for u in &updates {
            run.store
                .write_client(&u.client_id, &u.new_weights.to_dtype(wire), round)
                .map_err(|e| e.to_string())?;
        }

        let post: Vec<&EvalMetrics> = updates.iter().filter_map(|u| u.post_eval.as_ref()).collect();
        let pre: Vec<&EvalMetrics> = updates.iter().filter_map(|u| u.pre_eval.as_ref()).collect();
        let post_w = weighted(&post);
        let pre_w = weighted(&pre);

        let mut stop = false;
        let lr_used = rs.learning_rate;
        if let Some(loss) = post_w.as_ref().and_then(|m| m.loss) {
            let process = &run.spec.settings.process;
            let dir = process.monitor_direction();
            if process.plateau.is_some() {
                let (reduced, next) = plateau_step(&run.sched, loss, dir);
                if reduced {
                    let _ = run.store.event(&format!(
                        "round {round}: plateau, learning rate {} -> {}",
                        run.sched.current_lr, next.current_lr
                    ));
                }
                run.sched = next;
            }
            let weights_ref = format!("global/round_{round}.weights");
            let (s, next) = early_stop_step(&run.sched, loss, dir, round, &weights_ref);
            run.sched = next;
            stop = s && process.early_stopping.is_some();
            if run.sched.best_round == Some(round) {
                run.best = Some((round, run.global.clone()));
                run.store.set_best(round).map_err(|e| e.to_string())?;
            }
        }

        let summary = RoundSummary {
            round,
            outcome: RoundOutcomeKind::Aggregated,
            participants: updates.iter().map(|u| u.client_id.clone()).collect(),
            post_eval: post_w,
            pre_eval: pre_w,
            learning_rate: lr_used,
        };
        let mut extra = serde_json::Map::new();
        extra.insert("clients".into(), per_client.into());
        extra.insert("next_learning_rate".into(), run.sched.current_lr.into());
        let step = self.record_round(summary, extra)?;
        if stop {
            let run = self.running.as_ref().expect("running experiment");
            let _ = run.store.event(&format!(
                "round {round}: early stop, best round {:?}",
                run.sched.best_round
            ));
            return Ok(Step::Finish(ExperimentStatus::StoppedEarly));
        }
        Ok(step)
    }

    fn record_round(
        &mut self,
        summary: RoundSummary,
        extra: serde_json::Map<String, serde_json::Value>,
    ) -> std::result::Result<Step, String> {
        let run = self.running.as_mut().expect("running experiment");
        let mut record = match serde_json::to_value(&summary) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => serde_json::Map::new(),
        };
        record.extend(extra);
        run.store.append_metrics(&record).map_err(|e| e.to_string())?;
        run.summaries.push(summary);
        let snapshot = run.record(ExperimentStatus::Running, None);
        self.monitor.update(|s| {
            s.experiments.insert(snapshot.experiment_id.clone(), snapshot);
        });
        Ok(Step::Continue)
    }

    fn finish(&mut self, status: ExperimentStatus) {
        let Some(mut run) = self.running.take() else {
            return;
        };
        let id = run.spec.experiment_id.clone();
        let Some(last) = run.last_aggregated else {
            self.running = Some(run);
            self.fail("no round was aggregated; no final model".to_string());
            return;
        };
        let (source_round, model) = match (&run.best, status) {
            (Some((r, w)), ExperimentStatus::StoppedEarly) => (*r, w.clone()),
            _ => (last, run.global.clone()),
        };
        let wire = model.to_dtype(run.spec.settings.process.wire_dtype);
        if let Err(e) = run.store.write_final(&wire, source_round) {
            self.running = Some(run);
            self.fail(format!("cannot store final model: {e}"));
            return;
        }
        let reply = ModelReply {
            weights: Some(WireWeights::encode(&wire)),
            model_config: Some(run.spec.model_config.clone()),
            source_round: Some(source_round),
            error: None,
        };
        if let Err(e) = self.link.send(None, &id, source_round, Payload::ModelReply(Box::new(reply))) {
            log::error!("ps: final model broadcast for {id} failed: {e}");
        }
        let _ = run.store.event(&format!(
            "experiment {}: final model from round {source_round} broadcast",
            status_name(status)
        ));
        log::info!("ps: experiment {id} {}", status_name(status));
        run.round = None;
        self.conclude(run, status, Some((source_round, wire)), None);
    }

    fn fail(&mut self, diagnostic: String) {
        let Some(run) = self.running.take() else {
            return;
        };
        log::error!("ps: experiment {} failed: {diagnostic}", run.spec.experiment_id);
        let _ = run.store.event(&format!("experiment failed: {diagnostic}"));
        self.conclude(run, ExperimentStatus::Failed, None, Some(diagnostic));
    }

    fn conclude(
        &mut self,
        run: Running,
        status: ExperimentStatus,
        model: Option<(u64, ModelWeights)>,
        diagnostic: Option<String>,
    ) {
        let id = run.spec.experiment_id.clone();
        let final_round = model.as_ref().map(|m| m.0);
        let _ = run.store.write_json(
            "status.json",
            &serde_json::json!({ "status": status, "final_round": final_round, "diagnostic": diagnostic }),
        );
        let rounds_done = run.summaries.len() as u64;
        let progress = run.progress(status, final_round);
        let mut record = run.record(status, diagnostic.clone());
        record.final_round = final_round;
        self.finished.insert(
            id.clone(),
            Finished {
                model_config: run.spec.model_config.clone(),
                model,
            },
        );
        self.status
            .set_with_progress(NodeState::Idle, Some(&id), rounds_done, diagnostic, Some(progress));
        self.monitor.update(|s| {
            s.current = None;
            s.experiments.insert(id, record);
        });
    }

    // -- model requests -----------------------------------------------------

    fn on_model_request(&mut self, inbound: &Inbound) {
        let Some(to) = inbound.topic_client.clone() else {
            return;
        };
        let id = inbound.env.experiment_id.clone();
        let (round, reply) = self.model_for(&id);
        log::info!("ps: model request from {to} for {id}: {}", reply.error.as_deref().unwrap_or("ok"));
        if let Err(e) = self.link.send(Some(&to), &id, round, Payload::ModelReply(Box::new(reply))) {
            log::error!("ps: cannot answer model request from {to}: {e}");
        }
    }

    fn model_for(&self, id: &str) -> (u64, ModelReply) {
        if self.running.as_ref().is_some_and(|r| r.spec.experiment_id == id) {
            return (0, ModelReply::failure(format!("experiment {id} is not finalized")));
        }
        if let Some(f) = self.finished.get(id) {
            return match &f.model {
                Some((round, w)) => (
                    *round,
                    ModelReply {
                        weights: Some(WireWeights::encode(w)),
                        model_config: Some(f.model_config.clone()),
                        source_round: Some(*round),
                        error: None,
                    },
                ),
                None => (0, ModelReply::failure(format!("experiment {id} failed; no final model"))),
            };
        }
        if check_experiment_id(id).is_ok() {
            if let Some(reply) = self.model_from_disk(id) {
                return reply;
            }
        }
        (0, ModelReply::failure(format!("unknown experiment {id}")))
    }

    /// Experiments finished by an earlier server process.
    fn model_from_disk(&self, id: &str) -> Option<(u64, ModelReply)> {
        let root = &self.cfg.artifact_root;
        let dir = experiment_dir(root, id);
        if !dir.exists() {
            return None;
        }
        let path = final_model_path(root, id);
        if !path.exists() {
            return Some((0, ModelReply::failure(format!("experiment {id} is not finalized"))));
        }
        let spec = std::fs::read(dir.join("spec.json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<ExperimentSpec>(&b).ok());
        let stored = std::fs::read(&path).ok().and_then(|b| decode_weight_file(&b).ok());
        Some(match (stored, spec) {
            (Some((w, meta)), Some(spec)) => {
                let round = meta.and_then(|m| m.get("round").and_then(|r| r.as_u64())).unwrap_or(0);
                (
                    round,
                    ModelReply {
                        weights: Some(WireWeights::encode(&w)),
                        model_config: Some(spec.model_config),
                        source_round: Some(round),
                        error: None,
                    },
                )
            }
            _ => (0, ModelReply::failure(format!("experiment {id}: stored model unreadable"))),
        })
    }
}

impl Running {
    fn progress(&self, status: ExperimentStatus, final_round: Option<u64>) -> ExperimentProgress {
        ExperimentProgress {
            status,
            rounds_total: self.spec.settings.process.rounds,
            rounds_done: self.summaries.len() as u64,
            algorithm: self.spec.settings.algorithm.kind.name().to_string(),
            last_round: self.summaries.last().cloned(),
            final_round,
        }
    }

    fn record(&self, status: ExperimentStatus, diagnostic: Option<String>) -> ExperimentRecord {
        ExperimentRecord {
            experiment_id: self.spec.experiment_id.clone(),
            status,
            algorithm: self.spec.settings.algorithm.kind,
            rounds_total: self.spec.settings.process.rounds,
            rounds: self.summaries.clone(),
            final_round: None,
            diagnostic,
            job_aborts: self.job_aborts,
        }
    }
}

fn status_name(s: ExperimentStatus) -> &'static str {
    match s {
        ExperimentStatus::Running => "running",
        ExperimentStatus::Completed => "completed",
        ExperimentStatus::StoppedEarly => "stopped early",
        ExperimentStatus::Failed => "failed",
    }
}

/// Sample-weighted means over the reports that carry metrics.
fn weighted(reports: &[&EvalMetrics]) -> Option<WeightedMetrics> {
    if reports.is_empty() {
        return None;
    }
    let n: Vec<usize> = reports.iter().map(|m| m.n_samples).collect();
    let mean = |f: fn(&EvalMetrics) -> f64| {
        let values: Vec<f64> = reports.iter().map(|m| f(m)).collect();
        weighted_metric_mean(&values, &n).ok()
    };
    Some(WeightedMetrics {
        loss: mean(|m| m.loss),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        auprc: mean(|m| m.auprc),
        n_reports: reports.len(),
    })
}
