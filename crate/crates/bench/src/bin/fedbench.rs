//! `fedbench`: compare local, centralized and federated training.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedplat_bench::data::{BenchData, DataSource};
use fedplat_bench::{run_comparison, ComparisonConfig, Method};

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Local, centralized and federated benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the comparison and write results.{csv,json,md}.
    Run {
        /// `auto`, `synthetic` or a path to the stroke CSV.
        #[arg(long, default_value = "auto")]
        data: String,
        #[arg(long, default_value = "local,centralized,fedavg,fedprox,feddyn,scaffold")]
        methods: String,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 3)]
        clients: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Upper bound on passes over the data (epochs or rounds).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Per-experiment timeout for federated runs, in seconds.
        #[arg(long, default_value_t = 3600)]
        timeout: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            data,
            methods,
            folds,
            clients,
            seed,
            epochs,
            out,
            timeout,
        } => {
            let source = DataSource::resolve(&data, seed)?;
            println!("{}", source.banner());
            let data = BenchData::load(source).context("loading benchmark data")?;
            let mut cfg = ComparisonConfig::new(out.join("work"));
            cfg.methods = Method::parse_list(&methods)?;
            cfg.folds = folds;
            cfg.n_clients = clients;
            cfg.seed = seed;
            cfg.timeout = Duration::from_secs(timeout);
            if let Some(e) = epochs {
                cfg.preset.max_epochs = e;
            }
            let table = run_comparison(&data, &cfg)?;
            for path in table.write_all(&out)? {
                log::info!("wrote {}", path.display());
            }
            std::fs::remove_dir_all(out.join("work")).ok();
            println!("{}", table.to_markdown());
        }
    }
    Ok(())
}
