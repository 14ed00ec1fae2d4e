//! Wire protocol: topics, envelopes, weight codec, ACL and the embedded broker.

pub mod acl;
pub mod broker;
pub mod codec;
pub mod messages;
pub mod topics;

use crossbeam_channel::Receiver;

pub use acl::{acl_check, standard_rules, Action, AclRule, NodeIdentity, Role};
pub use broker::{Connection, Delivery, EmbeddedBroker, PublishOutcome};
pub use codec::{decode_weights, encode_weights, WeightManifest, WireWeights};
pub use messages::{Envelope, Payload};
pub use topics::{topic_matches, MsgType, TopicFamily, TopicScheme};

use crate::Result;

/// What a node needs from a broker connection, embedded or external.
pub trait Transport: Send + Sync {
    fn client_id(&self) -> &str;

    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<()>;

    fn subscribe(&self, filter: &str) -> Result<()>;

    /// Stream of deliveries for every active subscription.
    fn incoming(&self) -> Receiver<Delivery>;

    fn publish_envelope(&self, topic: &str, env: &Envelope) -> Result<()> {
        self.publish(topic, &env.to_bytes()?, env.msg_type().retained())
    }
}
