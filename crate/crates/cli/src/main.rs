//! `memscope`: record, inspect, and serve memory profiles of training runs.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use memscope_core::gateway::DEFAULT_GATEWAY_PORT;
use memscope_core::sampler::{DEFAULT_INTERVAL_MS, MIN_INTERVAL_MS};
use memscope_core::server::DEFAULT_HTTP_PORT;
use memscope_core::{DataDir, Registry, SamplerConfig, Store};
use tracing_subscriber::EnvFilter;

mod commands;
mod output;

use commands::UsageError;

#[derive(Parser)]
#[command(
    name = "memscope",
    version,
    about = "Memory profiler for machine-learning training runs"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Directory holding recorded runs and dashboard assets
    #[arg(long, global = true, env = "MEMSCOPE_DATA_DIR", default_value = "./memscope-data")]
    pub data_dir: PathBuf,

    /// Sampling interval in milliseconds
    #[arg(
        long,
        global = true,
        default_value_t = DEFAULT_INTERVAL_MS,
        value_parser = clap::value_parser!(u64).range(MIN_INTERVAL_MS..)
    )]
    pub interval_ms: u64,

    /// TCP port of the marker gateway (0 picks a free port)
    #[arg(long, global = true, default_value_t = DEFAULT_GATEWAY_PORT)]
    pub gateway_port: u16,

    /// HTTP port of the API and dashboard (0 picks a free port)
    #[arg(long, global = true, default_value_t = DEFAULT_HTTP_PORT)]
    pub port: u16,

    /// Read system counters from this file instead of /proc/meminfo
    #[arg(long, global = true, value_name = "PATH")]
    pub meminfo: Option<PathBuf>,
}

impl GlobalArgs {
    pub fn data_dir(&self) -> DataDir {
        DataDir::new(&self.data_dir)
    }

    pub fn sampler_config(&self, target_pid: Option<u32>) -> SamplerConfig {
        SamplerConfig {
            interval_ms: self.interval_ms,
            target_pid,
            source_path: self.meminfo.clone(),
        }
    }

    pub fn open(&self) -> anyhow::Result<(Arc<Registry>, Arc<Store>)> {
        let data = self.data_dir();
        let registry = Registry::open(data.clone())
            .with_context(|| format!("cannot open data directory {}", self.data_dir.display()))?;
        let store = Store::open(data)?;
        Ok((Arc::new(registry), Arc::new(store)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record a run, optionally wrapping a command (`record -- python train.py`)
    Record(commands::record::RecordArgs),
    /// Record a run against an already running process
    Attach(commands::record::AttachArgs),
    /// List recorded runs
    Runs(commands::inspect::RunsArgs),
    /// Print the summary and per-epoch statistics of a run
    Report(commands::inspect::ReportArgs),
    /// Export the samples of a run
    Export(commands::inspect::ExportArgs),
    /// Serve the HTTP API, live stream, and dashboard
    Serve,
    /// Allocate memory in steps, emitting epoch markers (for testing)
    DemoWorkload(commands::demo::DemoArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let result = match cli.command {
        Command::Record(args) => commands::record::record(&cli.global, args),
        Command::Attach(args) => commands::record::attach(&cli.global, args),
        Command::Runs(args) => commands::inspect::runs(&cli.global, args),
        Command::Report(args) => commands::inspect::report(&cli.global, args),
        Command::Export(args) => commands::inspect::export(&cli.global, args),
        Command::Serve => commands::serve::serve(&cli.global),
        Command::DemoWorkload(args) => commands::demo::run(&cli.global, args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
