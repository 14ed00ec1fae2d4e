//! `fedplat`: run a parameter server, a client node or the control center
//! against an MQTT broker, or a whole federation in-process.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedplat_core::model::data::{load_csv_raw, stratified_shards, synth_dataset, PreprocessSpec};
use fedplat_core::protocol::{standard_rules, NodeIdentity, Role};
use fedplat_runtime::cc::{CcConfig, ControlCenter, NetworkView};
use fedplat_runtime::client::{start_client, ClientConfig, NodeRole};
use fedplat_runtime::config::{self, CcFileConfig, Common, NodeFileConfig, PsFileConfig};
use fedplat_runtime::data::{holdout, LocalData, SpecLoader, StaticData};
use fedplat_runtime::federation::{FederationBuilder, NodeSpec};
use fedplat_runtime::link::Link;
use fedplat_runtime::mqtt::{mosquitto_acl, MqttTransport};
use fedplat_runtime::ps::{ParameterServer, PsConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "fedplat", version, about = "Federated learning over MQTT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the parameter server.
    Ps {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a client node (participant or observer).
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// Control center commands.
    Cc {
        #[arg(long)]
        config: PathBuf,
        #[command(subcommand)]
        command: CcCommand,
    },
    /// Print a mosquitto ACL file for the federation of a server config.
    Acl {
        #[arg(long)]
        config: PathBuf,
        /// Control center client ids to include.
        #[arg(long = "control-center", default_value = "cc")]
        control_centers: Vec<String>,
    },
    /// Run a whole federation in this process on the embedded broker.
    Sim {
        /// JSON file with `model_config` and `settings`.
        #[arg(long)]
        spec: PathBuf,
        /// A CSV path, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 3)]
        clients: usize,
        #[arg(long)]
        observer: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sim-artifacts")]
        root: PathBuf,
        #[arg(long, default_value_t = 3600)]
        timeout_secs: u64,
    },
}

#[derive(Subcommand)]
enum CcCommand {
    /// Serve the HTTP API.
    Serve,
    /// Submit an experiment from a JSON file with `model_config` and `settings`.
    Submit { spec: PathBuf },
    /// Print the network and experiment views.
    Status {
        #[arg(long, default_value_t = 2)]
        wait_secs: u64,
    },
    /// Print the network view periodically.
    Watch {
        #[arg(long, default_value_t = 2)]
        interval_secs: u64,
    },
    /// Fetch the final model of an experiment.
    FetchModel {
        id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ps { config } => run_ps(&config),
        Command::Node { config } => run_node(&config),
        Command::Cc { config, command } => run_cc(&config, command),
        Command::Acl {
            config,
            control_centers,
        } => {
            let cfg: PsFileConfig = config::load(&config)?;
            let mut ids = vec![NodeIdentity::new(cfg.common.client_id.clone(), Role::ParameterServer)];
            ids.extend(control_centers.iter().map(|c| NodeIdentity::new(c.clone(), Role::ControlCenter)));
            ids.extend(cfg.participants.iter().map(|c| NodeIdentity::new(c.clone(), Role::ClientParticipant)));
            ids.extend(cfg.observers.iter().map(|c| NodeIdentity::new(c.clone(), Role::ClientObserver)));
            print!("{}", mosquitto_acl(&standard_rules(&cfg.common.scheme()?, &ids)?));
            Ok(())
        }
        Command::Sim {
            spec,
            data,
            clients,
            observer,
            seed,
            root,
            timeout_secs,
        } => run_sim(&spec, &data, clients, observer, seed, &root, timeout_secs),
    }
}

fn link(common: &Common) -> Result<Link> {
    let transport = MqttTransport::connect(&common.broker, &common.client_id)?;
    Ok(Link::new(Arc::new(transport), common.scheme()?))
}

fn park() -> ! {
    loop {
        std::thread::park();
    }
}

fn run_ps(path: &Path) -> Result<()> {
    let cfg: PsFileConfig = config::load(path)?;
    let mut ps = ParameterServer::new(
        link(&cfg.common)?,
        PsConfig {
            participants: cfg.participants.clone(),
            observers: cfg.observers.clone(),
            artifact_root: cfg.common.artifact_root.clone(),
            heartbeat: cfg.common.heartbeat(),
        },
    )?;
    log::info!("parameter server {} ready", cfg.common.client_id);
    ps.run(&AtomicBool::new(false));
    bail!("broker connection closed")
}

fn run_node(path: &Path) -> Result<()> {
    let cfg: NodeFileConfig = config::load(path)?;
    let loader = Arc::new(SpecLoader::new(cfg.data.clone(), cfg.role == NodeRole::Observer));
    let _node = start_client(
        link(&cfg.common)?,
        ClientConfig {
            role: cfg.role,
            allow_metrics_upload: cfg.allow_metrics_upload,
            artifact_root: cfg.common.artifact_root.clone(),
            heartbeat: cfg.common.heartbeat(),
        },
        loader,
    )?;
    log::info!("{:?} node {} ready", cfg.role, cfg.common.client_id);
    park()
}

fn read_spec(path: &Path) -> Result<(Value, Value)> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut doc: Value = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
    let (Some(m), Some(s)) = (doc.get_mut("model_config").map(Value::take), doc.get_mut("settings").map(Value::take))
    else {
        bail!("{}: expected an object with `model_config` and `settings`", path.display());
    };
    Ok((m, s))
}

fn print_network(view: &NetworkView) {
    println!(
        "{:<20} {:<20} {:<12} {:<38} {:>6}  last seen",
        "client", "role", "state", "experiment", "round"
    );
    for n in &view.nodes {
        let mut flags = Vec::new();
        if n.stale {
            flags.push("stale");
        }
        if n.flagged {
            flags.push("UNKNOWN NODE");
        }
        println!(
            "{:<20} {:<20} {:<12} {:<38} {:>6}  {} {}{}",
            n.client_id,
            n.role,
            n.state.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_else(|| "-".into()),
            n.experiment_id.as_deref().unwrap_or("-"),
            n.round.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
            n.last_seen.map(|t| t.to_rfc3339()).unwrap_or_else(|| "never".into()),
            flags.join(", "),
            n.diagnostic.as_ref().map(|d| format!(" ({d})")).unwrap_or_default(),
        );
    }
}

fn run_cc(path: &Path, command: CcCommand) -> Result<()> {
    let cfg: CcFileConfig = config::load(path)?;
    let cc = ControlCenter::start(
        link(&cfg.common)?,
        CcConfig {
            known_nodes: cfg.known_nodes.clone(),
            artifact_root: cfg.common.artifact_root.clone(),
            submit_timeout: Duration::from_secs(cfg.submit_timeout_secs),
            model_timeout: Duration::from_secs(cfg.model_timeout_secs),
        },
    )?;
    match command {
        CcCommand::Serve => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                tokio::select! {
                    r = fedplat_runtime::http::serve(cc.clone(), cfg.listen) => r.context("http server"),
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })
        }
        CcCommand::Submit { spec } => {
            let (m, s) = read_spec(&spec)?;
            match cc.submit(m, s) {
                Ok(id) => {
                    println!("{id}");
                    Ok(())
                }
                Err(fedplat_runtime::cc::SubmitError::Invalid(report)) => {
                    for e in &report.errors {
                        eprintln!("{e}");
                    }
                    bail!("experiment is invalid")
                }
                Err(e) => Err(e.into()),
            }
        }
        CcCommand::Status { wait_secs } => {
            std::thread::sleep(Duration::from_secs(wait_secs));
            print_network(&cc.network());
            println!();
            println!("{}", serde_json::to_string_pretty(&cc.experiments())?);
            Ok(())
        }
        CcCommand::Watch { interval_secs } => loop {
            std::thread::sleep(Duration::from_secs(interval_secs.max(1)));
            print_network(&cc.network());
            println!();
        },
        CcCommand::FetchModel { id, out } => {
            let dest = match out {
                Some(p) => {
                    cc.request_final_model(&id, &p)?;
                    p
                }
                None => cc.fetch_model_to_store(&id)?,
            };
            println!("{}", dest.display());
            Ok(())
        }
    }
}

fn run_sim(
    spec: &Path,
    data: &str,
    n_clients: usize,
    observer: bool,
    seed: u64,
    root: &Path,
    timeout_secs: u64,
) -> Result<()> {
    if n_clients == 0 {
        bail!("at least one client is needed");
    }
    let (model_config, settings) = read_spec(spec)?;
    let (raw, pre) = if data == "synthetic" {
        (synth_dataset(seed, 5110, 0.05, 10)?, None)
    } else {
        let spec = PreprocessSpec::stroke();
        (load_csv_raw(Path::new(data), &spec)?, Some(spec))
    };
    let all: Vec<usize> = (0..raw.len()).collect();
    let parts = if observer { n_clients + 1 } else { n_clients };
    let shards = stratified_shards(&raw, &all, parts, seed);
    let numeric = pre.as_ref().map(|p| p.numeric_feature_indices());
    let mut builder = FederationBuilder::new(root);
    for (i, shard) in shards.iter().enumerate() {
        let local = raw.subset(shard);
        let prep = numeric.as_deref().map(|n| (n, pre.as_ref().is_some_and(|p| p.standardize)));
        let d = holdout(&local, 0.2, seed.wrapping_add(i as u64), prep)?;
        builder = if i < n_clients {
            builder.node(NodeSpec::participant(&format!("node-{}", i + 1), Arc::new(StaticData(d))))
        } else {
            // the observer evaluates on its whole shard
            let mut all_eval = d.clone();
            if let (Some(t), Some(e)) = (&d.train, &d.eval) {
                all_eval = LocalData::new(None, Some(fedplat_core::model::data::Dataset::concat(&[t, e])?));
            }
            builder.node(NodeSpec::observer("observer", Arc::new(StaticData(all_eval))))
        };
    }
    let fed = builder.start()?;
    let id = fed
        .cc
        .submit(model_config, settings)
        .map_err(|e| anyhow::anyhow!("{e}: {e:?}"))?;
    println!("experiment {id}");
    let record = fed
        .ps()
        .monitor
        .wait_finished(&id, Duration::from_secs(timeout_secs))
        .context("experiment did not finish in time")?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    println!("artifacts: {}", fed.ps_artifacts().join("experiments").join(&id).display());
    fed.shutdown();
    Ok(())
}
