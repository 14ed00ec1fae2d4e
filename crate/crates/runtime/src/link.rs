//! Plumbing shared by the agents: addressing, inbound decoding and status reports.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use crossbeam_channel::Receiver;
use fedplat_core::protocol::messages::{ExperimentProgress, NodeState, StatusReport};
use fedplat_core::protocol::{Delivery, Envelope, Payload, Role, TopicFamily, TopicScheme, Transport};

use crate::Result;

/// A transport bound to a topic scheme.
#[derive(Clone)]
pub struct Link {
    transport: Arc<dyn Transport>,
    scheme: TopicScheme,
}

impl Link {
    pub fn new(transport: Arc<dyn Transport>, scheme: TopicScheme) -> Self {
        Self { transport, scheme }
    }

    pub fn id(&self) -> &str {
        self.transport.client_id()
    }

    pub fn scheme(&self) -> &TopicScheme {
        &self.scheme
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn subscribe(&self, filter: &str) -> Result<()> {
        Ok(self.transport.subscribe(filter)?)
    }

    pub fn subscribe_family(&self, family: TopicFamily, client_id: Option<&str>) -> Result<()> {
        let topic = self.scheme.family_topic(family, client_id)?;
        self.subscribe(&topic)
    }

    pub fn incoming(&self) -> Receiver<Delivery> {
        self.transport.incoming()
    }

    /// Publishes `payload` on the topic of its message type. `topic_client`
    /// picks the individualized topic of per-client families.
    pub fn send(&self, topic_client: Option<&str>, experiment_id: &str, round: u64, payload: Payload) -> Result<()> {
        let topic = self.scheme.topic_for(payload.msg_type(), topic_client)?;
        let env = Envelope::new(self.id(), experiment_id, round, payload);
        Ok(self.transport.publish_envelope(&topic, &env)?)
    }

    /// Publishes on the sender's own individualized topic.
    pub fn send_own(&self, experiment_id: &str, round: u64, payload: Payload) -> Result<()> {
        let id = self.id().to_string();
        self.send(Some(&id), experiment_id, round, payload)
    }
}

#[derive(Debug, Clone)]
pub struct Inbound {
    pub env: Envelope,
    pub family: TopicFamily,
    /// Client segment of the topic, if any.
    pub topic_client: Option<String>,
    pub retained: bool,
}

/// Decodes a delivery and checks it is consistent with its topic: the message
/// type must belong to the topic family, and on node-owned topics the sender
/// id must equal the topic's client segment.
pub fn decode(scheme: &TopicScheme, d: &Delivery) -> std::result::Result<Inbound, String> {
    let (family, topic_client) = scheme
        .parse(&d.topic)
        .ok_or_else(|| format!("unexpected topic {}", d.topic))?;
    let env = Envelope::from_bytes(&d.payload).map_err(|e| format!("undecodable message on {}: {e}", d.topic))?;
    if env.msg_type().family() != family {
        return Err(format!("{:?} is not allowed on {}", env.msg_type(), d.topic));
    }
    let node_owned = matches!(
        family,
        TopicFamily::JobReplies | TopicFamily::ModelRequests | TopicFamily::StatusReports
    );
    if node_owned && topic_client.as_deref() != Some(env.sender_id.as_str()) {
        return Err(format!("sender {} does not own {}", env.sender_id, d.topic));
    }
    Ok(Inbound {
        env,
        family,
        topic_client,
        retained: d.retained,
    })
}

#[derive(Debug, Clone)]
struct StatusFields {
    state: NodeState,
    experiment_id: Option<String>,
    round: u64,
    diagnostic: Option<String>,
    progress: Option<ExperimentProgress>,
}

/// Publishes retained status reports on every change and on heartbeats.
pub struct StatusReporter {
    link: Link,
    role: Role,
    heartbeat: Duration,
    fields: Mutex<(StatusFields, Instant)>,
}

impl StatusReporter {
    pub fn new(link: Link, role: Role, heartbeat: Duration) -> Self {
        Self {
            link,
            role,
            heartbeat,
            fields: Mutex::new((
                StatusFields {
                    state: NodeState::Idle,
                    experiment_id: None,
                    round: 0,
                    diagnostic: None,
                    progress: None,
                },
                Instant::now(),
            )),
        }
    }

    pub fn heartbeat(&self) -> Duration {
        self.heartbeat
    }

    pub fn set(&self, state: NodeState, experiment_id: Option<&str>, round: u64, diagnostic: Option<String>) {
        let mut g = self.fields.lock().unwrap();
        g.0.state = state;
        g.0.experiment_id = experiment_id.map(str::to_string);
        g.0.round = round;
        g.0.diagnostic = diagnostic;
        self.publish_locked(&mut g);
    }

    pub fn set_with_progress(
        &self,
        state: NodeState,
        experiment_id: Option<&str>,
        round: u64,
        diagnostic: Option<String>,
        progress: Option<ExperimentProgress>,
    ) {
        let mut g = self.fields.lock().unwrap();
        g.0.progress = progress;
        drop(g);
        self.set(state, experiment_id, round, diagnostic);
    }

    pub fn state(&self) -> NodeState {
        self.fields.lock().unwrap().0.state
    }

    /// Republishes the current status if the heartbeat interval has elapsed.
    pub fn beat(&self, now: Instant) {
        let mut g = self.fields.lock().unwrap();
        if now.duration_since(g.1) >= self.heartbeat {
            self.publish_locked(&mut g);
        }
    }

    /// Time until the next heartbeat is due.
    pub fn until_next(&self, now: Instant) -> Duration {
        let g = self.fields.lock().unwrap();
        (g.1 + self.heartbeat).saturating_duration_since(now)
    }

    pub fn publish_now(&self) {
        let mut g = self.fields.lock().unwrap();
        self.publish_locked(&mut g);
    }

    fn publish_locked(&self, g: &mut (StatusFields, Instant)) {
        let f = &g.0;
        let report = StatusReport {
            client_id: self.link.id().to_string(),
            role: self.role,
            state: f.state,
            experiment_id: f.experiment_id.clone(),
            round: f.round,
            timestamp: Utc::now(),
            diagnostic: f.diagnostic.clone(),
            heartbeat_ms: self.heartbeat.as_millis() as u64,
            progress: f.progress.clone(),
        };
        let exp = f.experiment_id.clone().unwrap_or_default();
        if let Err(e) = self.link.send_own(&exp, f.round, Payload::StatusReport(Box::new(report))) {
            log::warn!("{}: status publish failed: {e}", self.link.id());
        }
        g.1 = Instant::now();
    }
}

/// A shared snapshot that readers can wait on.
pub struct Watch<T> {
    inner: Arc<(Mutex<T>, std::sync::Condvar)>,
}

impl<T> Clone for Watch<T> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Default> Default for Watch<T> {
    fn default() -> Self {
        Self {
            inner: Arc::new((Mutex::new(T::default()), std::sync::Condvar::new())),
        }
    }
}

impl<T: Clone> Watch<T> {
    pub fn snapshot(&self) -> T {
        self.inner.0.lock().unwrap().clone()
    }

    pub fn read<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        f(&self.inner.0.lock().unwrap())
    }

    /// Blocks until `pred` holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, mut pred: impl FnMut(&T) -> bool) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let (lock, cv) = &*self.inner;
        let mut g = lock.lock().unwrap();
        loop {
            if pred(&g) {
                return Some(g.clone());
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return None;
            }
            g = cv.wait_timeout(g, left).unwrap().0;
        }
    }

    pub(crate) fn update(&self, f: impl FnOnce(&mut T)) {
        let (lock, cv) = &*self.inner;
        f(&mut lock.lock().unwrap());
        cv.notify_all();
    }
}
