//! TOML configuration of the deployable agents.
//!
//! ```toml
//! client_id = "node-a"
//! prefix = "fl"
//! artifact_root = "./artifacts/node-a"
//! heartbeat_secs = 5
//! # node only
//! role = "participant"
//!
//! [broker]
//! host = "localhost"
//! port = 1883
//!
//! # node only
//! [data]
//! kind = "csv"
//! path = "data/hospital_a.csv"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedplat_core::protocol::{NodeIdentity, TopicScheme};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::client::NodeRole;
use crate::data::DataLoaderSpec;
use crate::mqtt::MqttSettings;
use crate::{Error, Result};

fn default_heartbeat() -> u64 {
    5
}

fn default_prefix() -> String {
    "fl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Common {
    pub client_id: String,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    pub artifact_root: PathBuf,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_secs: u64,
    pub broker: MqttSettings,
}

impl Common {
    pub fn heartbeat(&self) -> Duration {
        Duration::from_secs(self.heartbeat_secs.max(1))
    }

    pub fn scheme(&self) -> Result<TopicScheme> {
        Ok(TopicScheme::new(self.prefix.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsFileConfig {
    #[serde(flatten)]
    pub common: Common,
    pub participants: Vec<String>,
    #[serde(default)]
    pub observers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFileConfig {
    #[serde(flatten)]
    pub common: Common,
    pub role: NodeRole,
    #[serde(default)]
    pub allow_metrics_upload: Option<bool>,
    pub data: DataLoaderSpec,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_submit_timeout() -> u64 {
    10
}

fn default_model_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcFileConfig {
    #[serde(flatten)]
    pub common: Common,
    #[serde(default)]
    pub known_nodes: Vec<NodeIdentity>,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_submit_timeout")]
    pub submit_timeout_secs: u64,
    #[serde(default = "default_model_timeout")]
    pub model_timeout_secs: u64,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSource;

    #[test]
    fn node_config_parses() {
        let cfg: NodeFileConfig = toml::from_str(
            r#"
            client_id = "node-a"
            artifact_root = "/tmp/a"
            role = "participant"
            [broker]
            host = "localhost"
            [data]
            kind = "csv"
            path = "data/a.csv"
            eval_fraction = 0.25
            "#,
        )
        .unwrap();
        assert_eq!(cfg.common.prefix, "fl");
        assert_eq!(cfg.common.broker.port, 1883);
        assert_eq!(cfg.common.heartbeat(), Duration::from_secs(5));
        assert_eq!(cfg.role, NodeRole::Participant);
        assert!(matches!(cfg.data.source, DataSource::Csv { .. }));
        assert_eq!(cfg.data.eval_fraction, 0.25);
    }

    #[test]
    fn cc_config_parses_roster() {
        let cfg: CcFileConfig = toml::from_str(
            r#"
            client_id = "cc"
            artifact_root = "/tmp/cc"
            listen = "0.0.0.0:9000"
            known_nodes = [
                { client_id = "ps", role = "parameter_server" },
                { client_id = "a", role = "client_participant" },
            ]
            [broker]
            host = "broker"
            tls = true
            username = "cc"
            password = "secret"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.known_nodes.len(), 2);
        assert_eq!(cfg.listen.port(), 9000);
        assert!(cfg.common.broker.tls);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        assert!(matches!(
            load::<PsFileConfig>(Path::new("/nonexistent.toml")),
            Err(Error::Config(_))
        ));
    }
}
