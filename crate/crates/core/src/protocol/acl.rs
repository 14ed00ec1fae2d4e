//! Default-deny access control for the broker.
//!
//! Rules only grant. A publish is allowed when some rule of the client matches
//! the topic; a subscription is allowed when some rule covers the requested
//! filter entirely.

use serde::{Deserialize, Serialize};

use super::topics::{filter_covers, topic_matches, TopicFamily, TopicScheme};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ParameterServer,
    ClientParticipant,
    ClientObserver,
    ControlCenter,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeIdentity {
    pub client_id: String,
    pub role: Role,
}

impl NodeIdentity {
    pub fn new(client_id: impl Into<String>, role: Role) -> Self {
        Self {
            client_id: client_id.into(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Publish,
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclRule {
    pub client_id: String,
    pub action: Action,
    pub topic_pattern: String,
}

impl AclRule {
    pub fn new(client_id: &str, action: Action, topic_pattern: impl Into<String>) -> Self {
        Self {
            client_id: client_id.to_string(),
            action,
            topic_pattern: topic_pattern.into(),
        }
    }
}

/// For [`Action::Subscribe`] `topic` is the requested filter.
pub fn acl_check(rules: &[AclRule], client_id: &str, action: Action, topic: &str) -> bool {
    rules
        .iter()
        .filter(|r| r.client_id == client_id && r.action == action)
        .any(|r| match action {
            Action::Publish => topic_matches(&r.topic_pattern, topic),
            Action::Subscribe => filter_covers(&r.topic_pattern, topic),
        })
}

/// Least-privilege grants for a federation.
///
/// The control center also gets its own model-request/model-reply pair so it
/// can fetch final models under its own identity.
pub fn standard_rules(scheme: &TopicScheme, identities: &[NodeIdentity]) -> Result<Vec<AclRule>> {
    let n_ps = identities.iter().filter(|i| i.role == Role::ParameterServer).count();
    if n_ps != 1 {
        return Err(Error::Acl(format!(
            "a federation needs exactly one parameter server, got {n_ps}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for i in identities {
        super::topics::validate_client_id(&i.client_id)?;
        if !seen.insert(i.client_id.as_str()) {
            return Err(Error::Acl(format!("duplicate client id {}", i.client_id)));
        }
    }

    let topic = |f: TopicFamily, id: Option<&str>| scheme.family_topic(f, id);
    let mut rules = Vec::new();
    for ident in identities {
        let id = ident.client_id.as_str();
        let mut grant = |action: Action, pattern: String| rules.push(AclRule::new(id, action, pattern));
        use Action::{Publish as Pub, Subscribe as Sub};
        use TopicFamily as F;
        match ident.role {
            Role::ControlCenter => {
                grant(Pub, topic(F::ControlCenter, None)?);
                grant(Sub, topic(F::ParameterServerReplies, None)?);
                grant(Sub, scheme.all_clients(F::StatusReports));
                grant(Pub, topic(F::ModelRequests, Some(id))?);
                grant(Sub, topic(F::ModelReplies, Some(id))?);
            }
            Role::ParameterServer => {
                grant(Sub, topic(F::ControlCenter, None)?);
                grant(Sub, scheme.all_clients(F::JobReplies));
                grant(Sub, scheme.all_clients(F::ModelRequests));
                grant(Pub, topic(F::ParameterServerReplies, None)?);
                grant(Pub, topic(F::JobRequests, None)?);
                grant(Pub, topic(F::ModelReplies, None)?);
                grant(Pub, scheme.all_clients(F::ModelReplies));
                grant(Pub, topic(F::StatusReports, Some(id))?);
            }
            Role::ClientParticipant | Role::ClientObserver => {
                if ident.role == Role::ClientParticipant {
                    grant(Sub, topic(F::JobRequests, None)?);
                    grant(Pub, topic(F::JobReplies, Some(id))?);
                }
                grant(Sub, topic(F::ModelReplies, None)?);
                grant(Sub, topic(F::ModelReplies, Some(id))?);
                grant(Pub, topic(F::ModelRequests, Some(id))?);
                grant(Pub, topic(F::StatusReports, Some(id))?);
            }
        }
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn federation() -> (TopicScheme, Vec<AclRule>) {
        let s = TopicScheme::new("P").unwrap();
        let ids = vec![
            NodeIdentity::new("ps", Role::ParameterServer),
            NodeIdentity::new("cc", Role::ControlCenter),
            NodeIdentity::new("a", Role::ClientParticipant),
            NodeIdentity::new("b", Role::ClientParticipant),
            NodeIdentity::new("c", Role::ClientParticipant),
            NodeIdentity::new("obs", Role::ClientObserver),
        ];
        let rules = standard_rules(&s, &ids).unwrap();
        (s, rules)
    }

    #[test]
    fn observer_rules() {
        let (_, r) = federation();
        assert!(!acl_check(&r, "obs", Action::Publish, "P/job-replies/obs"));
        assert!(acl_check(&r, "obs", Action::Subscribe, "P/model-replies"));
        assert!(!acl_check(&r, "obs", Action::Subscribe, "P/job-requests"));
    }

    #[test]
    fn participant_cannot_use_other_suffix() {
        let (_, r) = federation();
        assert!(acl_check(&r, "a", Action::Publish, "P/job-replies/a"));
        assert!(!acl_check(&r, "a", Action::Publish, "P/job-replies/b"));
        assert!(!acl_check(&r, "a", Action::Subscribe, "P/job-replies/+"));
    }

    #[test]
    fn ps_may_reply_to_any_client() {
        let (_, r) = federation();
        assert!(acl_check(&r, "ps", Action::Publish, "P/model-replies/anyone"));
        assert!(acl_check(&r, "ps", Action::Subscribe, "P/job-replies/+"));
        assert!(acl_check(&r, "ps", Action::Subscribe, "P/job-replies/a"));
        assert!(!acl_check(&r, "ps", Action::Publish, "P/status-reports/a"));
    }

    #[test]
    fn nobody_gets_everything() {
        let (_, r) = federation();
        assert!(r.iter().all(|rule| !rule.topic_pattern.contains('#')));
        for id in ["ps", "cc", "a", "obs", "stranger"] {
            assert!(!acl_check(&r, id, Action::Subscribe, "#"));
            assert!(!acl_check(&r, id, Action::Subscribe, "P/#"));
        }
    }

    #[test]
    fn exactly_one_ps() {
        let s = TopicScheme::new("P").unwrap();
        let two = [
            NodeIdentity::new("ps1", Role::ParameterServer),
            NodeIdentity::new("ps2", Role::ParameterServer),
        ];
        assert!(standard_rules(&s, &two).is_err());
        assert!(standard_rules(&s, &[]).is_err());
        let dup = [
            NodeIdentity::new("ps", Role::ParameterServer),
            NodeIdentity::new("ps", Role::ClientParticipant),
        ];
        assert!(standard_rules(&s, &dup).is_err());
    }
}
