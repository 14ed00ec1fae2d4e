//! Topic layout below a federation prefix and MQTT wildcard matching.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MsgType {
    ExperimentRequest,
    ExperimentAccepted,
    ExperimentRejected,
    JobRequest,
    JobAcknowledge,
    JobReply,
    JobFailed,
    JobAbort,
    ModelRequest,
    ModelReply,
    StatusReport,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::ExperimentRequest,
        MsgType::ExperimentAccepted,
        MsgType::ExperimentRejected,
        MsgType::JobRequest,
        MsgType::JobAcknowledge,
        MsgType::JobReply,
        MsgType::JobFailed,
        MsgType::JobAbort,
        MsgType::ModelRequest,
        MsgType::ModelReply,
        MsgType::StatusReport,
    ];

    pub fn family(self) -> TopicFamily {
        match self {
            MsgType::ExperimentRequest => TopicFamily::ControlCenter,
            MsgType::ExperimentAccepted | MsgType::ExperimentRejected => {
                TopicFamily::ParameterServerReplies
            }
            MsgType::JobRequest | MsgType::JobAbort => TopicFamily::JobRequests,
            MsgType::JobAcknowledge | MsgType::JobReply | MsgType::JobFailed => {
                TopicFamily::JobReplies
            }
            MsgType::ModelRequest => TopicFamily::ModelRequests,
            MsgType::ModelReply => TopicFamily::ModelReplies,
            MsgType::StatusReport => TopicFamily::StatusReports,
        }
    }

    /// Status reports are the only retained messages.
    pub fn retained(self) -> bool {
        self == MsgType::StatusReport
    }
}

/// One row of the topic table. Several message types can share a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopicFamily {
    ControlCenter,
    ParameterServerReplies,
    JobRequests,
    JobReplies,
    ModelRequests,
    ModelReplies,
    StatusReports,
}

impl TopicFamily {
    pub const ALL: [TopicFamily; 7] = [
        TopicFamily::ControlCenter,
        TopicFamily::ParameterServerReplies,
        TopicFamily::JobRequests,
        TopicFamily::JobReplies,
        TopicFamily::ModelRequests,
        TopicFamily::ModelReplies,
        TopicFamily::StatusReports,
    ];

    pub fn segment(self) -> &'static str {
        match self {
            TopicFamily::ControlCenter => "control-center",
            TopicFamily::ParameterServerReplies => "parameter-server-replies",
            TopicFamily::JobRequests => "job-requests",
            TopicFamily::JobReplies => "job-replies",
            TopicFamily::ModelRequests => "model-requests",
            TopicFamily::ModelReplies => "model-replies",
            TopicFamily::StatusReports => "status-reports",
        }
    }

    /// `None`: never per-client. `Some(true)`: always per-client.
    /// `Some(false)`: both forms exist (model replies).
    fn per_client(self) -> Option<bool> {
        match self {
            TopicFamily::ControlCenter
            | TopicFamily::ParameterServerReplies
            | TopicFamily::JobRequests => None,
            TopicFamily::JobReplies | TopicFamily::ModelRequests | TopicFamily::StatusReports => {
                Some(true)
            }
            TopicFamily::ModelReplies => Some(false),
        }
    }
}

pub fn validate_client_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Topic("client id must not be empty".into()));
    }
    if id.contains(['/', '+', '#']) || id.chars().any(char::is_control) {
        return Err(Error::Topic(format!(
            "client id {id:?} contains a reserved character"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicScheme {
    prefix: String,
}

impl TopicScheme {
    pub fn new(prefix: impl Into<String>) -> Result<Self> {
        let prefix = prefix.into();
        if prefix.is_empty() || prefix.starts_with('/') || prefix.ends_with('/') {
            return Err(Error::Topic(format!("bad topic prefix {prefix:?}")));
        }
        if prefix.contains(['+', '#']) {
            return Err(Error::Topic(format!("wildcard in topic prefix {prefix:?}")));
        }
        if prefix.split('/').any(str::is_empty) {
            return Err(Error::Topic(format!("empty level in topic prefix {prefix:?}")));
        }
        Ok(Self { prefix })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn family_topic(&self, family: TopicFamily, client_id: Option<&str>) -> Result<String> {
        match (family.per_client(), client_id) {
            (None, _) | (Some(false), None) => Ok(format!("{}/{}", self.prefix, family.segment())),
            (Some(_), Some(id)) => {
                validate_client_id(id)?;
                Ok(format!("{}/{}/{id}", self.prefix, family.segment()))
            }
            (Some(true), None) => Err(Error::Topic(format!(
                "{} topics need a client id",
                family.segment()
            ))),
        }
    }

    /// Topic carrying `msg_type`. Per-client families require `client_id`;
    /// model replies go to the broadcast topic when it is `None`.
    pub fn topic_for(&self, msg_type: MsgType, client_id: Option<&str>) -> Result<String> {
        let family = msg_type.family();
        let client_id = if family.per_client().is_none() {
            None
        } else {
            client_id
        };
        self.family_topic(family, client_id)
    }

    /// Subscription filter covering every client's topic in a family.
    pub fn all_clients(&self, family: TopicFamily) -> String {
        format!("{}/{}/+", self.prefix, family.segment())
    }

    /// Inverse of [`TopicScheme::family_topic`].
    pub fn parse(&self, topic: &str) -> Option<(TopicFamily, Option<String>)> {
        let rest = topic.strip_prefix(&self.prefix)?.strip_prefix('/')?;
        let (head, tail) = match rest.split_once('/') {
            Some((h, t)) => (h, Some(t)),
            None => (rest, None),
        };
        let family = TopicFamily::ALL.into_iter().find(|f| f.segment() == head)?;
        match (family.per_client(), tail) {
            (None, None) | (Some(false), None) => Some((family, None)),
            (Some(_), Some(id)) if validate_client_id(id).is_ok() => {
                Some((family, Some(id.to_string())))
            }
            _ => None,
        }
    }
}

fn check_filter(filter: &str) -> Result<()> {
    if filter.is_empty() {
        return Err(Error::Topic("empty topic filter".into()));
    }
    let levels: Vec<&str> = filter.split('/').collect();
    for (i, level) in levels.iter().enumerate() {
        if level.contains('#') && (*level != "#" || i + 1 != levels.len()) {
            return Err(Error::Topic(format!("misplaced '#' in {filter:?}")));
        }
        if level.contains('+') && *level != "+" {
            return Err(Error::Topic(format!("misplaced '+' in {filter:?}")));
        }
    }
    Ok(())
}

pub fn validate_filter(filter: &str) -> Result<()> {
    check_filter(filter)
}

pub fn validate_topic_name(topic: &str) -> Result<()> {
    if topic.is_empty() {
        return Err(Error::Topic("empty topic".into()));
    }
    if topic.contains(['+', '#']) {
        return Err(Error::Topic(format!("wildcard in topic name {topic:?}")));
    }
    Ok(())
}

/// MQTT matching of a concrete topic against a filter: `+` is one level,
/// a trailing `#` matches the parent level and everything below it.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// Whether every topic matched by `inner` is also matched by `outer`.
pub fn filter_covers(outer: &str, inner: &str) -> bool {
    let mut o = outer.split('/');
    let mut i = inner.split('/');
    loop {
        match (o.next(), i.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(level)) if level != "#" => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme() -> TopicScheme {
        TopicScheme::new("org/fed/task-1").unwrap()
    }

    #[test]
    fn topic_table() {
        let s = scheme();
        assert_eq!(s.topic_for(MsgType::JobRequest, None).unwrap(), "org/fed/task-1/job-requests");
        assert_eq!(
            s.topic_for(MsgType::JobReply, Some("hospital-a")).unwrap(),
            "org/fed/task-1/job-replies/hospital-a"
        );
        assert_eq!(
            s.topic_for(MsgType::StatusReport, Some("ps")).unwrap(),
            "org/fed/task-1/status-reports/ps"
        );
        assert_eq!(s.topic_for(MsgType::ModelReply, None).unwrap(), "org/fed/task-1/model-replies");
        assert_eq!(
            s.topic_for(MsgType::ModelReply, Some("obs")).unwrap(),
            "org/fed/task-1/model-replies/obs"
        );
        assert!(s.topic_for(MsgType::JobFailed, None).is_err());
        assert!(s.topic_for(MsgType::ModelRequest, Some("a/b")).is_err());
    }

    #[test]
    fn prefix_rules() {
        assert!(TopicScheme::new("a/+/b").is_err());
        assert!(TopicScheme::new("a/#").is_err());
        assert!(TopicScheme::new("").is_err());
        assert!(TopicScheme::new("a//b").is_err());
        assert!(TopicScheme::new("a/b").is_ok());
    }

    #[test]
    fn parse_inverts_topic_for() {
        let s = scheme();
        for family in TopicFamily::ALL {
            for id in [None, Some("cn-1")] {
                if let Ok(topic) = s.family_topic(family, id) {
                    let expect_id = id.filter(|_| family.per_client().is_some());
                    assert_eq!(s.parse(&topic), Some((family, expect_id.map(String::from))));
                }
            }
        }
        assert_eq!(s.parse("other/job-requests"), None);
        assert_eq!(s.parse("org/fed/task-1/job-requests/x"), None);
    }

    #[test]
    fn wildcard_matching() {
        assert!(topic_matches("a/+/c", "a/b/c"));
        assert!(!topic_matches("a/+/c", "a/b/d"));
        assert!(!topic_matches("a/+", "a/b/c"));
        assert!(topic_matches("a/#", "a"));
        assert!(topic_matches("a/#", "a/b/c"));
        assert!(topic_matches("#", "x/y"));
        assert!(!topic_matches("a/b", "a/b/c"));
        assert!(!topic_matches("a/b/c", "a/b"));
    }

    #[test]
    fn covering_filters() {
        assert!(filter_covers("a/+", "a/b"));
        assert!(filter_covers("a/+", "a/+"));
        assert!(!filter_covers("a/+", "a/#"));
        assert!(filter_covers("a/#", "a/+/c"));
        assert!(!filter_covers("a/b", "a/+"));
        assert!(!filter_covers("a/b", "#"));
    }

    #[test]
    fn filter_syntax() {
        assert!(validate_filter("a/+/b").is_ok());
        assert!(validate_filter("a/#").is_ok());
        assert!(validate_filter("a/#/b").is_err());
        assert!(validate_filter("a/b+").is_err());
        assert!(validate_topic_name("a/+").is_err());
    }
}
