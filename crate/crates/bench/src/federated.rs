//! One federated run on a fresh in-process federation, with a traffic audit.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use fedplat_core::model::config::ModelConfig;
use fedplat_core::protocol::codec::read_weight_file;
use fedplat_core::protocol::messages::ExperimentStatus;
use fedplat_core::protocol::TopicFamily;
use fedplat_core::schema::ExperimentSettings;
use fedplat_core::ModelWeights;
use fedplat_runtime::data::{LocalData, StaticData};
use fedplat_runtime::federation::{Federation, FederationBuilder, NodeSpec, CC_ID};
use fedplat_runtime::ps::ExperimentRecord;
use serde::Serialize;

use crate::data::FoldData;
use crate::{BenchError, Result};

/// Broker traffic of one run, counted per topic family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageAudit {
    pub rounds: u64,
    pub job_requests: u64,
    /// Per client: publishes on its job-replies topic (acks plus replies).
    pub job_replies: Vec<(String, u64)>,
    /// Per client: job requests delivered to it.
    pub job_requests_delivered: Vec<(String, u64)>,
    pub model_replies: u64,
    pub denied: u64,
}

impl MessageAudit {
    fn collect(fed: &Federation, clients: &[String], rounds: u64) -> Result<Self> {
        let stats = fed.broker.stats();
        let scheme = &fed.scheme;
        let requests = scheme.family_topic(TopicFamily::JobRequests, None)?;
        let mut job_replies = Vec::new();
        let mut delivered = Vec::new();
        for c in clients {
            let topic = scheme.family_topic(TopicFamily::JobReplies, Some(c))?;
            job_replies.push((c.clone(), stats.published_matching(&topic)));
            delivered.push((c.clone(), stats.delivered_to(c, &requests)));
        }
        Ok(Self {
            rounds,
            job_requests: stats.published_matching(&requests),
            job_replies,
            job_requests_delivered: delivered,
            model_replies: stats.published_matching(&scheme.all_clients(TopicFamily::ModelReplies))
                + stats.published_matching(&scheme.family_topic(TopicFamily::ModelReplies, None)?),
            denied: stats.denied_publish + stats.denied_subscribe,
        })
    }

    /// Every round went through the broker: one request per round, an ack
    /// and a reply from every client per round, the final model broadcast
    /// and the control center's copy, and no ACL denials.
    pub fn check(&self) -> Result<()> {
        let fail = |what: String| Err(BenchError::Audit(what));
        if self.rounds == 0 {
            return fail("no rounds ran".into());
        }
        if self.job_requests != self.rounds {
            return fail(format!("{} job requests for {} rounds", self.job_requests, self.rounds));
        }
        for (c, n) in &self.job_replies {
            if *n != 2 * self.rounds {
                return fail(format!("{c} published {n} job replies for {} rounds", self.rounds));
            }
        }
        for (c, n) in &self.job_requests_delivered {
            if *n != self.rounds {
                return fail(format!("{c} received {n} job requests for {} rounds", self.rounds));
            }
        }
        if self.model_replies < 2 {
            return fail(format!(
                "{} model replies, expected the broadcast and one fetch",
                self.model_replies
            ));
        }
        if self.denied != 0 {
            return fail(format!("{} ACL denials", self.denied));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FederatedOutcome {
    pub record: ExperimentRecord,
    pub weights: ModelWeights,
    pub audit: MessageAudit,
}

pub fn client_id(i: usize) -> String {
    format!("node-{}", i + 1)
}

/// Runs one experiment on a fresh federation whose participants hold the
/// fold's client shards, then fetches the final model through the control
/// center.
pub fn run_federated(
    fold: &FoldData,
    cfg: &ModelConfig,
    settings: &ExperimentSettings,
    experiment_id: &str,
    work_dir: &Path,
    timeout: Duration,
) -> Result<FederatedOutcome> {
    let ids: Vec<String> = (0..fold.clients.len()).map(client_id).collect();
    let mut builder = FederationBuilder::new(work_dir).heartbeat(Duration::from_secs(5));
    for (id, c) in ids.iter().zip(&fold.clients) {
        let data = LocalData::new(Some(c.train.clone()), Some(c.val.clone()));
        builder = builder.node(NodeSpec::participant(id, Arc::new(StaticData(data))));
    }
    let fed = builder.start()?;
    let record = fed.run_experiment_as(experiment_id, cfg, settings, timeout)?;
    if !matches!(
        record.status,
        ExperimentStatus::Completed | ExperimentStatus::StoppedEarly
    ) {
        return Err(BenchError::Federated {
            id: experiment_id.to_string(),
            status: format!("{:?}: {}", record.status, record.diagnostic.clone().unwrap_or_default()),
        });
    }
    let dest = work_dir
        .join(CC_ID)
        .join("models")
        .join(format!("{experiment_id}.weights"));
    fed.cc
        .request_final_model(experiment_id, &dest)
        .map_err(|e| BenchError::Federated {
            id: experiment_id.to_string(),
            status: format!("final model unavailable: {e}"),
        })?;
    let weights = read_weight_file(&dest)?.to_dtype(fedplat_core::DType::F64);
    let audit = MessageAudit::collect(&fed, &ids, record.rounds.len() as u64)?;
    fed.shutdown();
    audit.check()?;
    Ok(FederatedOutcome { record, weights, audit })
}
