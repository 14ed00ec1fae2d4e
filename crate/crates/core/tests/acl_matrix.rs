//! Exhaustive check of the standard grants: every message-flow arrow is
//! allowed, every other (node, action, topic) pair is denied.

use std::collections::HashSet;

use fedplat_core::protocol::acl::{acl_check, standard_rules, Action, NodeIdentity, Role};
use fedplat_core::protocol::broker::{EmbeddedBroker, PublishOutcome};
use fedplat_core::protocol::topics::TopicScheme;

const P: &str = "org/fed/cep-1";
const NODES: [(&str, Role); 6] = [
    ("ps", Role::ParameterServer),
    ("cc", Role::ControlCenter),
    ("h1", Role::ClientParticipant),
    ("h2", Role::ClientParticipant),
    ("h3", Role::ClientParticipant),
    ("obs", Role::ClientObserver),
];

fn identities() -> Vec<NodeIdentity> {
    NODES.iter().map(|(id, r)| NodeIdentity::new(*id, *r)).collect()
}

fn all_topics() -> Vec<String> {
    let mut t = vec![
        format!("{P}/control-center"),
        format!("{P}/parameter-server-replies"),
        format!("{P}/job-requests"),
        format!("{P}/model-replies"),
    ];
    for (id, _) in NODES {
        for fam in ["job-replies", "model-requests", "model-replies", "status-reports"] {
            t.push(format!("{P}/{fam}/{id}"));
        }
    }
    t
}

/// Message flows written out by hand from the topic table.
fn arrows() -> HashSet<(String, Action, String)> {
    let mut a = HashSet::new();
    let mut add = |id: &str, act: Action, topic: String| {
        a.insert((id.to_string(), act, topic));
    };
    use Action::{Publish as Pub, Subscribe as Sub};
    // experiment request / accepted / rejected
    add("cc", Pub, format!("{P}/control-center"));
    add("ps", Sub, format!("{P}/control-center"));
    add("ps", Pub, format!("{P}/parameter-server-replies"));
    add("cc", Sub, format!("{P}/parameter-server-replies"));
    // job request / abort
    add("ps", Pub, format!("{P}/job-requests"));
    // final model broadcast
    add("ps", Pub, format!("{P}/model-replies"));
    for (id, role) in NODES {
        let participant = role == Role::ClientParticipant;
        let client = participant || role == Role::ClientObserver;
        if participant {
            add(id, Sub, format!("{P}/job-requests"));
            add(id, Pub, format!("{P}/job-replies/{id}"));
        }
        // the PS may receive job replies and model requests from any id
        add("ps", Sub, format!("{P}/job-replies/{id}"));
        add("ps", Sub, format!("{P}/model-requests/{id}"));
        add("ps", Pub, format!("{P}/model-replies/{id}"));
        if client {
            add(id, Sub, format!("{P}/model-replies"));
            add(id, Sub, format!("{P}/model-replies/{id}"));
            add(id, Pub, format!("{P}/model-requests/{id}"));
        }
        if client || role == Role::ParameterServer {
            add(id, Pub, format!("{P}/status-reports/{id}"));
        }
        add("cc", Sub, format!("{P}/status-reports/{id}"));
    }
    // control center fetches final models under its own identity
    add("cc", Pub, format!("{P}/model-requests/cc"));
    add("cc", Sub, format!("{P}/model-replies/cc"));
    a
}

#[test]
fn grants_equal_message_flows_exactly() {
    let scheme = TopicScheme::new(P).unwrap();
    let rules = standard_rules(&scheme, &identities()).unwrap();
    let expected = arrows();
    let mut mismatches = Vec::new();
    for (id, _) in NODES.iter().chain([("stranger", Role::ClientParticipant)].iter()) {
        for topic in all_topics() {
            for action in [Action::Publish, Action::Subscribe] {
                let allowed = acl_check(&rules, id, action, &topic);
                let want = expected.contains(&(id.to_string(), action, topic.clone()));
                if allowed != want {
                    mismatches.push(format!("{id} {action:?} {topic}: allowed={allowed}"));
                }
            }
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:#?}");
}

#[test]
fn wildcard_subscriptions() {
    let scheme = TopicScheme::new(P).unwrap();
    let rules = standard_rules(&scheme, &identities()).unwrap();
    let allowed: Vec<(&str, String)> = vec![
        ("ps", format!("{P}/job-replies/+")),
        ("ps", format!("{P}/model-requests/+")),
        ("cc", format!("{P}/status-reports/+")),
    ];
    for (id, f) in &allowed {
        assert!(acl_check(&rules, id, Action::Subscribe, f), "{id} {f}");
    }
    for (id, _) in NODES {
        for f in ["#".to_string(), format!("{P}/#"), format!("{P}/+"), format!("{P}/model-replies/+")] {
            assert!(!acl_check(&rules, id, Action::Subscribe, &f), "{id} {f}");
        }
    }
}

#[test]
fn broker_enforces_and_audits_every_denial() {
    let scheme = TopicScheme::new(P).unwrap();
    let broker = EmbeddedBroker::for_federation(&scheme, &identities()).unwrap();
    let expected = arrows();
    let mut denials = 0;
    for (id, _) in NODES {
        let conn = broker.connect(id).unwrap();
        for topic in all_topics() {
            let want_pub = expected.contains(&(id.to_string(), Action::Publish, topic.clone()));
            let outcome = conn.publish(&topic, b"{}", false).unwrap();
            assert_eq!(outcome != PublishOutcome::Denied, want_pub, "{id} publish {topic}");
            let want_sub = expected.contains(&(id.to_string(), Action::Subscribe, topic.clone()));
            assert_eq!(conn.subscribe(&topic).is_ok(), want_sub, "{id} subscribe {topic}");
            denials += (!want_pub) as usize + (!want_sub) as usize;
        }
    }
    let audit = broker.audit_log();
    assert_eq!(audit.len(), denials);
}
