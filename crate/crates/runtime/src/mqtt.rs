//! MQTT transport for deployments with an external broker.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver};
use fedplat_core::protocol::messages::MAX_PAYLOAD_BYTES;
use fedplat_core::protocol::{Action, AclRule, Delivery, Transport};
use rumqttc::{Client, Event, MqttOptions, Packet, QoS};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn default_port() -> u16 {
    1883
}

fn default_keep_alive() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqttSettings {
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// TLS with the platform's root certificates.
    #[serde(default)]
    pub tls: bool,
    #[serde(default)]
    pub username: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_secs: u64,
}

impl MqttSettings {
    pub fn plain(host: &str, port: u16) -> Self {
        Self {
            host: host.to_string(),
            port,
            tls: false,
            username: None,
            password: None,
            keep_alive_secs: default_keep_alive(),
        }
    }
}

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub struct MqttTransport {
    client_id: String,
    client: Client,
    rx: Receiver<Delivery>,
    subscriptions: Arc<Mutex<Vec<String>>>,
    stopping: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

fn transport_err(e: impl std::fmt::Display) -> fedplat_core::Error {
    fedplat_core::Error::Transport(e.to_string())
}

impl MqttTransport {
    /// Connects and waits for the broker's acknowledgement.
    pub fn connect(settings: &MqttSettings, client_id: &str) -> Result<Self> {
        let mut opts = MqttOptions::new(client_id, &settings.host, settings.port);
        opts.set_keep_alive(Duration::from_secs(settings.keep_alive_secs.max(5)));
        let max = MAX_PAYLOAD_BYTES + 64 * 1024;
        opts.set_max_packet_size(max, max);
        if let Some(user) = &settings.username {
            opts.set_credentials(user, settings.password.clone().unwrap_or_default());
        }
        if settings.tls {
            opts.set_transport(rumqttc::Transport::tls_with_default_config());
        }
        let (client, mut connection) = Client::new(opts, 256);
        let (tx, rx) = unbounded();
        let (ready_tx, ready_rx) = crossbeam_channel::bounded(1);
        let subscriptions: Arc<Mutex<Vec<String>>> = Arc::default();
        let stopping = Arc::new(AtomicBool::new(false));
        let (subs, stop, resub) = (subscriptions.clone(), stopping.clone(), client.clone());
        let id = client_id.to_string();
        let thread = std::thread::Builder::new()
            .name(format!("mqtt-{client_id}"))
            .spawn(move || {
                let mut connected_once = false;
                for event in connection.iter() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match event {
                        Ok(Event::Incoming(Packet::ConnAck(_))) => {
                            if connected_once {
                                log::info!("{id}: reconnected, restoring subscriptions");
                                for f in subs.lock().unwrap().iter() {
                                    if let Err(e) = resub.try_subscribe(f.clone(), QoS::AtLeastOnce) {
                                        log::warn!("{id}: resubscribe to {f} failed: {e}");
                                    }
                                }
                            } else {
                                connected_once = true;
                                let _ = ready_tx.send(Ok(()));
                            }
                        }
                        Ok(Event::Incoming(Packet::Publish(p))) => {
                            let d = Delivery {
                                topic: p.topic.clone(),
                                payload: Arc::from(&p.payload[..]),
                                retained: p.retain,
                            };
                            if tx.send(d).is_err() {
                                break;
                            }
                        }
                        Ok(_) => {}
                        Err(e) if !connected_once => {
                            let _ = ready_tx.send(Err(e.to_string()));
                            break;
                        }
                        Err(e) => {
                            log::warn!("{id}: connection error: {e}");
                            std::thread::sleep(Duration::from_millis(500));
                        }
                    }
                }
            })?;
        match ready_rx.recv_timeout(CONNECT_TIMEOUT) {
            Ok(Ok(())) => Ok(Self {
                client_id: client_id.to_string(),
                client,
                rx,
                subscriptions,
                stopping,
                thread: Mutex::new(Some(thread)),
            }),
            Ok(Err(e)) => Err(Error::Broker(format!(
                "cannot connect to {}:{}: {e}",
                settings.host, settings.port
            ))),
            Err(_) => {
                stopping.store(true, Ordering::SeqCst);
                let _ = client.try_disconnect();
                Err(Error::Broker(format!(
                    "no answer from {}:{} within {CONNECT_TIMEOUT:?}",
                    settings.host, settings.port
                )))
            }
        }
    }
}

impl Transport for MqttTransport {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> fedplat_core::Result<()> {
        self.client
            .publish(topic, QoS::AtLeastOnce, retain, payload.to_vec())
            .map_err(transport_err)
    }

    fn subscribe(&self, filter: &str) -> fedplat_core::Result<()> {
        self.client
            .subscribe(filter, QoS::AtLeastOnce)
            .map_err(transport_err)?;
        self.subscriptions.lock().unwrap().push(filter.to_string());
        Ok(())
    }

    fn incoming(&self) -> Receiver<Delivery> {
        self.rx.clone()
    }
}

impl Drop for MqttTransport {
    fn drop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        let _ = self.client.try_disconnect();
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

/// Renders ACL rules in mosquitto's `acl_file` format.
pub fn mosquitto_acl(rules: &[AclRule]) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for r in rules {
        if current != Some(r.client_id.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str(&format!("user {}\n", r.client_id));
            current = Some(&r.client_id);
        }
        let access = match r.action {
            Action::Publish => "write",
            Action::Subscribe => "read",
        };
        out.push_str(&format!("topic {access} {}\n", r.topic_pattern));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedplat_core::protocol::{standard_rules, NodeIdentity, Role, TopicScheme};

    #[test]
    fn acl_export_groups_rules_per_user() {
        let scheme = TopicScheme::new("fl").unwrap();
        let ids = [
            NodeIdentity::new("ps", Role::ParameterServer),
            NodeIdentity::new("a", Role::ClientParticipant),
        ];
        let text = mosquitto_acl(&standard_rules(&scheme, &ids).unwrap());
        assert_eq!(text.matches("user ").count(), 2);
        assert!(text.contains("user a\ntopic read fl/job-requests\n"));
        assert!(text.contains("topic write fl/job-replies/a\n"));
    }

    #[test]
    fn unreachable_broker_fails_fast() {
        // port 1 on localhost refuses connections
        let err = MqttTransport::connect(&MqttSettings::plain("127.0.0.1", 1), "x").err();
        assert!(matches!(err, Some(Error::Broker(_))));
    }
}
