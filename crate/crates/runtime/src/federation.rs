//! A whole federation in one process, wired through the embedded broker.
//!
//! Used by the simulator, the benchmark and the integration tests. Nodes may
//! be registered without being started (`absent`): the server counts them
//! as participants and they never answer, unless a test connects as them.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fedplat_core::model::config::ModelConfig;
use fedplat_core::protocol::{Connection, EmbeddedBroker, NodeIdentity, Role, TopicScheme};
use fedplat_core::schema::{ExperimentRequestInput, ExperimentSettings};

use crate::cc::{CcConfig, ControlCenter, SubmitError};
use crate::client::{start_client, ClientConfig, ClientHandle, NodeRole};
use crate::data::DataLoader;
use crate::link::Link;
use crate::ps::{ExperimentRecord, ParameterServer, PsConfig, PsHandle};
use crate::{Error, Result};

pub const PS_ID: &str = "ps";
pub const CC_ID: &str = "cc";

pub struct NodeSpec {
    pub client_id: String,
    pub role: NodeRole,
    pub loader: Arc<dyn DataLoader>,
    pub allow_metrics_upload: Option<bool>,
}

impl NodeSpec {
    pub fn participant(id: &str, loader: Arc<dyn DataLoader>) -> Self {
        Self {
            client_id: id.to_string(),
            role: NodeRole::Participant,
            loader,
            allow_metrics_upload: None,
        }
    }

    pub fn observer(id: &str, loader: Arc<dyn DataLoader>) -> Self {
        Self {
            role: NodeRole::Observer,
            ..Self::participant(id, loader)
        }
    }
}

pub struct FederationBuilder {
    prefix: String,
    root: PathBuf,
    heartbeat: Duration,
    nodes: Vec<NodeSpec>,
    absent: Vec<(String, Role)>,
    record_history: bool,
}

impl FederationBuilder {
    pub fn new(root: &Path) -> Self {
        Self {
            prefix: "fl".into(),
            root: root.to_path_buf(),
            heartbeat: Duration::from_secs(1),
            nodes: Vec::new(),
            absent: Vec::new(),
            record_history: false,
        }
    }

    pub fn prefix(mut self, prefix: &str) -> Self {
        self.prefix = prefix.to_string();
        self
    }

    pub fn heartbeat(mut self, heartbeat: Duration) -> Self {
        self.heartbeat = heartbeat;
        self
    }

    pub fn node(mut self, node: NodeSpec) -> Self {
        self.nodes.push(node);
        self
    }

    /// Registers a participant that is not started.
    pub fn absent_participant(mut self, id: &str) -> Self {
        self.absent.push((id.to_string(), Role::ClientParticipant));
        self
    }

    /// Registers an identity that is not started, for a test to connect as.
    pub fn register(mut self, id: &str, role: Role) -> Self {
        self.absent.push((id.to_string(), role));
        self
    }

    pub fn record_history(mut self, on: bool) -> Self {
        self.record_history = on;
        self
    }

    pub fn start(self) -> Result<Federation> {
        let scheme = TopicScheme::new(self.prefix.clone())?;
        let mut identities = vec![
            NodeIdentity::new(PS_ID, Role::ParameterServer),
            NodeIdentity::new(CC_ID, Role::ControlCenter),
        ];
        identities.extend(
            self.nodes
                .iter()
                .map(|n| NodeIdentity::new(n.client_id.clone(), n.role.acl_role())),
        );
        identities.extend(self.absent.iter().map(|(id, role)| NodeIdentity::new(id.clone(), *role)));
        let broker = EmbeddedBroker::for_federation(&scheme, &identities)?;
        broker.record_history(self.record_history);

        let ids_with = |role: Role| -> Vec<String> {
            identities
                .iter()
                .filter(|i| i.role == role)
                .map(|i| i.client_id.clone())
                .collect()
        };
        let link = |id: &str| -> Result<Link> { Ok(Link::new(Arc::new(broker.connect(id)?), scheme.clone())) };

        let ps = ParameterServer::new(
            link(PS_ID)?,
            PsConfig {
                participants: ids_with(Role::ClientParticipant),
                observers: ids_with(Role::ClientObserver),
                artifact_root: self.root.join(PS_ID),
                heartbeat: self.heartbeat,
            },
        )?
        .spawn();

        let mut clients = Vec::new();
        for n in self.nodes {
            let cfg = ClientConfig {
                role: n.role,
                allow_metrics_upload: n.allow_metrics_upload,
                artifact_root: self.root.join(&n.client_id),
                heartbeat: self.heartbeat,
            };
            clients.push(start_client(link(&n.client_id)?, cfg, n.loader)?);
        }

        let cc = ControlCenter::start(
            link(CC_ID)?,
            CcConfig {
                known_nodes: identities.clone(),
                artifact_root: self.root.join(CC_ID),
                submit_timeout: Duration::from_secs(10),
                model_timeout: Duration::from_secs(30),
            },
        )?;

        Ok(Federation {
            broker,
            scheme,
            identities,
            root: self.root,
            ps: Some(ps),
            clients,
            cc,
        })
    }
}

pub struct Federation {
    pub broker: EmbeddedBroker,
    pub scheme: TopicScheme,
    pub identities: Vec<NodeIdentity>,
    pub root: PathBuf,
    ps: Option<PsHandle>,
    pub clients: Vec<ClientHandle>,
    pub cc: Arc<ControlCenter>,
}

impl Federation {
    pub fn ps(&self) -> &PsHandle {
        self.ps.as_ref().expect("parameter server running")
    }

    pub fn client(&self, id: &str) -> Option<&ClientHandle> {
        self.clients.iter().find(|c| c.id() == id)
    }

    /// A raw connection, e.g. to script an absent participant.
    pub fn connect(&self, id: &str) -> Result<Connection> {
        Ok(self.broker.connect(id)?)
    }

    pub fn ps_artifacts(&self) -> PathBuf {
        self.root.join(PS_ID)
    }

    /// Submits through the control center and waits for the server to finish.
    pub fn run_experiment(
        &self,
        model_config: &ModelConfig,
        settings: &ExperimentSettings,
        timeout: Duration,
    ) -> Result<ExperimentRecord> {
        self.run_experiment_as(&uuid::Uuid::new_v4().to_string(), model_config, settings, timeout)
    }

    /// [`run_experiment`](Self::run_experiment) under a fixed experiment id.
    pub fn run_experiment_as(
        &self,
        id: &str,
        model_config: &ModelConfig,
        settings: &ExperimentSettings,
        timeout: Duration,
    ) -> Result<ExperimentRecord> {
        let input = ExperimentRequestInput::from_typed(model_config, settings);
        let id = self
            .cc
            .submit_as(id, input.model_config, input.settings)
            .map_err(|e| match e {
                SubmitError::Runtime(e) => e,
                SubmitError::Invalid(r) => Error::Config(format!("invalid experiment: {:?}", r.errors)),
                SubmitError::Rejected(errors) | SubmitError::Busy(errors) => {
                    Error::Config(format!("experiment rejected: {errors:?}"))
                }
                SubmitError::Timeout => Error::Broker("parameter server unreachable".into()),
            })?;
        self.ps()
            .monitor
            .wait_finished(&id, timeout)
            .ok_or_else(|| Error::Broker(format!("experiment {id} did not finish within {timeout:?}")))
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.cc.shutdown();
        for c in self.clients.drain(..) {
            c.stop();
        }
        if let Some(ps) = self.ps.take() {
            ps.stop();
        }
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        self.stop_all();
    }
}
