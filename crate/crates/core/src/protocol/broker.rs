//! In-process publish/subscribe broker with ACL enforcement and retained
//! messages.
//!
//! Every connection owns one bounded delivery queue. A message matching
//! several filters of the same connection is delivered once. Deliveries are
//! queued under the broker lock, so each subscriber sees publishes in the
//! order the broker accepted them; only a saturated queue falls back to a
//! blocking send outside the lock.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, Utc};
use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::Serialize;

use super::acl::{acl_check, standard_rules, Action, AclRule, NodeIdentity};
use super::messages::MAX_PAYLOAD_BYTES;
use super::topics::{topic_matches, validate_filter, validate_topic_name, TopicScheme};
use super::Transport;
use crate::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct Delivery {
    pub topic: String,
    pub payload: Arc<[u8]>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    pub client_id: String,
    pub action: Action,
    pub topic: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishOutcome {
    /// Accepted; value is the number of connections it was queued for.
    Delivered(usize),
    Denied,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    /// Accepted publishes per topic.
    pub published: BTreeMap<String, u64>,
    /// Deliveries per `(client_id, topic)`.
    pub delivered: BTreeMap<(String, String), u64>,
    pub denied_publish: u64,
    pub denied_subscribe: u64,
}

impl BrokerStats {
    pub fn published_matching(&self, filter: &str) -> u64 {
        self.published
            .iter()
            .filter(|(t, _)| topic_matches(filter, t))
            .map(|(_, n)| n)
            .sum()
    }

    pub fn delivered_to(&self, client_id: &str, filter: &str) -> u64 {
        self.delivered
            .iter()
            .filter(|((c, t), _)| c == client_id && topic_matches(filter, t))
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct PublishRecord {
    pub client_id: String,
    pub topic: String,
    pub payload: Arc<[u8]>,
    pub retain: bool,
}

struct Session {
    id: u64,
    filters: Vec<String>,
    tx: Sender<Delivery>,
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, Session>,
    retained: BTreeMap<String, Arc<[u8]>>,
    audit: Vec<AuditEntry>,
    stats: BrokerStats,
    next_session: u64,
    history: Option<Vec<PublishRecord>>,
}

struct Inner {
    rules: Vec<AclRule>,
    allowed: HashSet<String>,
    capacity: usize,
    state: Mutex<State>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn deny(&self, state: &mut State, client_id: &str, action: Action, topic: &str) {
        log::warn!("acl denied {action:?} by {client_id} on {topic}");
        match action {
            Action::Publish => state.stats.denied_publish += 1,
            Action::Subscribe => state.stats.denied_subscribe += 1,
        }
        state.audit.push(AuditEntry {
            at: Utc::now(),
            client_id: client_id.to_string(),
            action,
            topic: topic.to_string(),
        });
    }
}

/// Queues under the lock; returns deliveries that found a full queue.
fn enqueue(
    state: &mut State,
    targets: Vec<(String, Sender<Delivery>)>,
    delivery: &Delivery,
) -> Vec<(Sender<Delivery>, Delivery)> {
    let mut blocked = Vec::new();
    for (client, tx) in targets {
        *state
            .stats
            .delivered
            .entry((client, delivery.topic.clone()))
            .or_default() += 1;
        match tx.try_send(delivery.clone()) {
            Ok(()) | Err(TrySendError::Disconnected(_)) => {}
            Err(TrySendError::Full(d)) => blocked.push((tx, d)),
        }
    }
    blocked
}

fn flush_blocked(blocked: Vec<(Sender<Delivery>, Delivery)>) {
    for (tx, d) in blocked {
        let _ = tx.send(d);
    }
}

#[derive(Clone)]
pub struct EmbeddedBroker {
    inner: Arc<Inner>,
}

impl EmbeddedBroker {
    /// `allowed` is the client-id allowlist used for authentication.
    pub fn new(rules: Vec<AclRule>, allowed: impl IntoIterator<Item = String>) -> Self {
        Self::with_capacity(rules, allowed, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(
        rules: Vec<AclRule>,
        allowed: impl IntoIterator<Item = String>,
        capacity: usize,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                rules,
                allowed: allowed.into_iter().collect(),
                capacity: capacity.max(1),
                state: Mutex::new(State::default()),
            }),
        }
    }

    /// Broker for a federation using [`standard_rules`].
    pub fn for_federation(scheme: &TopicScheme, identities: &[NodeIdentity]) -> Result<Self> {
        let rules = standard_rules(scheme, identities)?;
        Ok(Self::new(
            rules,
            identities.iter().map(|i| i.client_id.clone()),
        ))
    }

    /// A new connection replaces an existing session of the same client.
    pub fn connect(&self, client_id: &str) -> Result<Connection> {
        if !self.inner.allowed.contains(client_id) {
            return Err(Error::Acl(format!("connection refused for unknown client {client_id}")));
        }
        let (tx, rx) = bounded(self.inner.capacity);
        let mut state = self.inner.lock();
        state.next_session += 1;
        let id = state.next_session;
        state.sessions.insert(
            client_id.to_string(),
            Session {
                id,
                filters: Vec::new(),
                tx,
            },
        );
        Ok(Connection {
            inner: Arc::clone(&self.inner),
            client_id: client_id.to_string(),
            session: id,
            rx,
        })
    }

    pub fn rules(&self) -> &[AclRule] {
        &self.inner.rules
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.inner.lock().audit.clone()
    }

    pub fn stats(&self) -> BrokerStats {
        self.inner.lock().stats.clone()
    }

    pub fn retained(&self, topic: &str) -> Option<Arc<[u8]>> {
        self.inner.lock().retained.get(topic).cloned()
    }

    pub fn retained_count(&self) -> usize {
        self.inner.lock().retained.len()
    }

    /// Starts (or stops and clears) recording every accepted publish.
    pub fn record_history(&self, on: bool) {
        self.inner.lock().history = on.then(Vec::new);
    }

    pub fn history(&self) -> Vec<PublishRecord> {
        self.inner.lock().history.clone().unwrap_or_default()
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.inner.lock().sessions.contains_key(client_id)
    }
}

pub struct Connection {
    inner: Arc<Inner>,
    client_id: String,
    session: u64,
    rx: Receiver<Delivery>,
}

impl Connection {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<PublishOutcome> {
        validate_topic_name(topic)?;
        if payload.len() > MAX_PAYLOAD_BYTES {
            return Err(Error::Codec(format!(
                "payload of {} bytes exceeds the {MAX_PAYLOAD_BYTES} byte limit",
                payload.len()
            )));
        }
        let mut state = self.inner.lock();
        if !acl_check(&self.inner.rules, &self.client_id, Action::Publish, topic) {
            self.inner.deny(&mut state, &self.client_id, Action::Publish, topic);
            return Ok(PublishOutcome::Denied);
        }
        let payload: Arc<[u8]> = Arc::from(payload);
        if retain {
            if payload.is_empty() {
                state.retained.remove(topic);
            } else {
                state.retained.insert(topic.to_string(), Arc::clone(&payload));
            }
        }
        *state.stats.published.entry(topic.to_string()).or_default() += 1;
        if let Some(history) = state.history.as_mut() {
            history.push(PublishRecord {
                client_id: self.client_id.clone(),
                topic: topic.to_string(),
                payload: Arc::clone(&payload),
                retain,
            });
        }
        let targets: Vec<(String, Sender<Delivery>)> = state
            .sessions
            .iter()
            .filter(|(_, s)| s.filters.iter().any(|f| topic_matches(f, topic)))
            .map(|(c, s)| (c.clone(), s.tx.clone()))
            .collect();
        let n = targets.len();
        let delivery = Delivery {
            topic: topic.to_string(),
            payload,
            retained: false,
        };
        let blocked = enqueue(&mut state, targets, &delivery);
        drop(state);
        flush_blocked(blocked);
        Ok(PublishOutcome::Delivered(n))
    }

    /// Denied subscriptions are audited and reported as [`Error::Acl`].
    pub fn subscribe(&self, filter: &str) -> Result<()> {
        validate_filter(filter)?;
        let mut state = self.inner.lock();
        if !acl_check(&self.inner.rules, &self.client_id, Action::Subscribe, filter) {
            self.inner.deny(&mut state, &self.client_id, Action::Subscribe, filter);
            return Err(Error::Acl(format!(
                "{} may not subscribe to {filter}",
                self.client_id
            )));
        }
        let tx = match state.sessions.get_mut(&self.client_id) {
            Some(s) if s.id == self.session => {
                if !s.filters.iter().any(|f| f == filter) {
                    s.filters.push(filter.to_string());
                }
                s.tx.clone()
            }
            _ => return Err(Error::Acl(format!("session of {} was replaced", self.client_id))),
        };
        let replay: Vec<Delivery> = state
            .retained
            .iter()
            .filter(|(t, _)| topic_matches(filter, t))
            .map(|(t, p)| Delivery {
                topic: t.clone(),
                payload: Arc::clone(p),
                retained: true,
            })
            .collect();
        let mut blocked = Vec::new();
        for d in replay {
            blocked.extend(enqueue(&mut state, vec![(self.client_id.clone(), tx.clone())], &d));
        }
        drop(state);
        flush_blocked(blocked);
        Ok(())
    }

    pub fn receiver(&self) -> Receiver<Delivery> {
        self.rx.clone()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }

    /// Everything currently queued, without waiting.
    pub fn drain(&self) -> Vec<Delivery> {
        self.rx.try_iter().collect()
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let mut state = self.inner.lock();
        if state.sessions.get(&self.client_id).map(|s| s.id) == Some(self.session) {
            state.sessions.remove(&self.client_id);
        }
    }
}

impl Transport for Connection {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<()> {
        match Connection::publish(self, topic, payload, retain)? {
            PublishOutcome::Delivered(_) => Ok(()),
            PublishOutcome::Denied => Err(Error::Acl(format!(
                "{} may not publish to {topic}",
                self.client_id
            ))),
        }
    }

    fn subscribe(&self, filter: &str) -> Result<()> {
        Connection::subscribe(self, filter)
    }

    fn incoming(&self) -> Receiver<Delivery> {
        self.receiver()
    }
}
