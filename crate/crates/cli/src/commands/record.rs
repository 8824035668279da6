use std::net::SocketAddr;
use std::process::{Child, Command, ExitCode, ExitStatus};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::Args;
use memscope_core::gateway::{serve_events, RunObserver};
use memscope_core::live::LiveHub;
use memscope_core::registry::{CloseStatus, Hyperparameters};
use memscope_core::sampler::{now_unix_ms, read_process_memory, read_system_memory, StopReason};
use memscope_core::server::{http_api, AppState};
use memscope_core::session::{Recorder, Session};

use super::{close_dangling, interrupted, watch_interrupts, UsageError};
use crate::{output, GlobalArgs};

const POLL: Duration = Duration::from_millis(10);

/// Hyperparameters of the run being recorded.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Model name
    #[arg(long, visible_alias = "name", default_value = "unnamed")]
    pub model: String,

    /// Number of layers
    #[arg(long, default_value_t = 1)]
    pub layers: u32,

    /// Nodes per layer
    #[arg(long, default_value_t = 1)]
    pub nodes: u32,

    /// Number of training epochs
    #[arg(long, default_value_t = 1)]
    pub epochs: u32,

    /// Dataset name
    #[arg(long, default_value = "unspecified")]
    pub dataset: String,

    /// Free-form description of the input data quality
    #[arg(long)]
    pub input_quality: Option<String>,

    /// Additional hyperparameter; repeatable. Known field names override the
    /// dedicated flags, anything else is stored as an extra field.
    #[arg(long = "hp", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub hp: Vec<(String, String)>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl RunArgs {
    pub fn hyperparameters(&self) -> Result<Hyperparameters, UsageError> {
        let mut hp = Hyperparameters {
            model_name: self.model.clone(),
            num_layers: self.layers,
            nodes_per_layer: self.nodes,
            epochs: self.epochs,
            dataset: self.dataset.clone(),
            input_quality: self.input_quality.clone(),
            extra: Default::default(),
        };
        let number = |k: &str, v: &str| {
            v.parse::<u32>()
                .map_err(|_| UsageError(format!("--hp {k}: expected a positive integer, got `{v}`")))
        };
        for (k, v) in &self.hp {
            match k.as_str() {
                "model_name" | "model" | "name" => hp.model_name = v.clone(),
                "num_layers" | "layers" => hp.num_layers = number(k, v)?,
                "nodes_per_layer" | "nodes" => hp.nodes_per_layer = number(k, v)?,
                "epochs" => hp.epochs = number(k, v)?,
                "dataset" => hp.dataset = v.clone(),
                "input_quality" => hp.input_quality = Some(v.clone()),
                _ => {
                    hp.extra.insert(k.clone(), v.clone());
                }
            }
        }
        hp.validate()
            .map_err(|e| UsageError(format!("invalid hyperparameter {e}")))?;
        Ok(hp)
    }
}

#[derive(Args, Debug)]
pub struct SessionArgs {
    /// Stop after this many seconds
    #[arg(long, value_name = "SECONDS")]
    pub duration_s: Option<f64>,

    /// Also serve the HTTP API and live stream on --port while recording
    #[arg(long)]
    pub serve: bool,
}

#[derive(Args, Debug)]
pub struct RecordArgs {
    #[command(flatten)]
    pub run: RunArgs,

    #[command(flatten)]
    pub session: SessionArgs,

    /// Command to run and profile; recording stops when it exits
    #[arg(last = true, value_name = "COMMAND")]
    pub command: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AttachArgs {
    /// Process to profile; recording stops when it exits
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub pid: u32,

    #[command(flatten)]
    pub run: RunArgs,

    #[command(flatten)]
    pub session: SessionArgs,
}

enum Target {
    None,
    Spawn(Vec<String>),
    Attach(u32),
}

enum Ending {
    Interrupted,
    DurationElapsed,
    TargetExited,
    ChildExited(ExitStatus),
    SamplerStopped,
}

pub fn record(global: &GlobalArgs, args: RecordArgs) -> anyhow::Result<ExitCode> {
    let target = if args.command.is_empty() {
        Target::None
    } else {
        Target::Spawn(args.command)
    };
    run_session(global, &args.run, &args.session, target)
}

pub fn attach(global: &GlobalArgs, args: AttachArgs) -> anyhow::Result<ExitCode> {
    run_session(global, &args.run, &args.session, Target::Attach(args.pid))
}

fn run_session(global: &GlobalArgs, run: &RunArgs, opts: &SessionArgs, target: Target) -> anyhow::Result<ExitCode> {
    let hp = run.hyperparameters()?;
    let duration = match opts.duration_s {
        Some(s) if !(s.is_finite() && s > 0.0) => {
            return Err(UsageError(format!("--duration-s must be positive, got {s}")).into())
        }
        s => s.map(Duration::from_secs_f64),
    };
    read_system_memory(&global.sampler_config(None), now_unix_ms())?;
    if let Target::Attach(pid) = target {
        read_process_memory(pid, now_unix_ms()).with_context(|| format!("cannot attach to pid {pid}"))?;
    }
    watch_interrupts()?;

    let (registry, store) = global.open()?;
    let hub = opts.serve.then(|| Arc::new(LiveHub::default()));
    let recorder = Arc::new(Recorder::new(Arc::clone(&store), hub.clone()));
    let observer: Arc<dyn RunObserver> = recorder.clone();
    let gateway = serve_events(
        ("127.0.0.1", global.gateway_port),
        Arc::clone(&registry),
        Some(observer),
    )?;
    eprintln!("marker gateway on {}", gateway.local_addr());

    let runtime;
    let server = match &hub {
        Some(hub) => {
            runtime = tokio::runtime::Runtime::new()?;
            let state = AppState {
                registry: Arc::clone(&registry),
                store: Arc::clone(&store),
                hub: Arc::clone(hub),
                sampler_config: global.sampler_config(None),
                recorder: Some(Arc::clone(&recorder)),
            };
            let addr = SocketAddr::from(([127, 0, 0, 1], global.port));
            let server = runtime.block_on(http_api(addr, state))?;
            eprintln!("serving http://{}", server.local_addr());
            Some((&runtime, server))
        }
        None => None,
    };

    let run = registry.create_run(hp, now_unix_ms())?;
    let run_id = run.run_id.clone();
    println!("run_id: {run_id}");
    recorder.attach(&run_id);

    let mut child: Option<Child> = None;
    let target_pid = match &target {
        Target::None => None,
        Target::Attach(pid) => Some(*pid),
        Target::Spawn(argv) => {
            let spawned = Command::new(&argv[0])
                .args(&argv[1..])
                .env("MEMSCOPE_RUN_ID", &run_id)
                .env("MEMSCOPE_GATEWAY", gateway.local_addr().to_string())
                .env("MEMSCOPE_DATA_DIR", &global.data_dir)
                .spawn();
            match spawned {
                Ok(c) => {
                    let pid = c.id();
                    child = Some(c);
                    Some(pid)
                }
                Err(e) => {
                    registry.close_run(&run_id, CloseStatus::Aborted, now_unix_ms())?;
                    bail!("cannot start `{}`: {e}", argv[0]);
                }
            }
        }
    };
    registry.set_target_pid(&run_id, target_pid)?;

    let session = Session::start(global.sampler_config(target_pid), Arc::clone(&recorder))?;
    let started = Instant::now();
    let ending = loop {
        if interrupted() {
            break Ending::Interrupted;
        }
        if let Some(c) = child.as_mut() {
            if let Some(status) = c.try_wait()? {
                break Ending::ChildExited(status);
            }
        }
        if let Target::Attach(pid) = target {
            if read_process_memory(pid, 0).is_err() {
                break Ending::TargetExited;
            }
        }
        if duration.is_some_and(|d| started.elapsed() >= d) {
            break Ending::DurationElapsed;
        }
        if session.sampler_finished() {
            break Ending::SamplerStopped;
        }
        thread::sleep(POLL);
    };

    if let Some(mut c) = child.take() {
        if !matches!(ending, Ending::ChildExited(_)) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
    let report = session.stop();
    gateway.stop();

    let status = match (&ending, &report.sampler.reason) {
        (_, StopReason::Failed(_)) | (Ending::Interrupted, _) => CloseStatus::Aborted,
        (Ending::ChildExited(s), _) if !s.success() => CloseStatus::Aborted,
        _ => CloseStatus::Closed,
    };
    recorder.detach(&run_id);
    registry.close_run(&run_id, status, now_unix_ms())?;
    close_dangling(&registry, &recorder, CloseStatus::Aborted);
    if let Some((runtime, server)) = server {
        runtime.block_on(server.shutdown());
    }
    if report.failed_appends > 0 {
        eprintln!("warning: {} samples could not be stored", report.failed_appends);
    }

    output::print_report(&registry, &store, &run_id)?;

    if let StopReason::Failed(e) = report.sampler.reason {
        bail!("sampling stopped: {e}");
    }
    match ending {
        Ending::Interrupted => eprintln!("interrupted; run {run_id} closed as aborted"),
        Ending::ChildExited(s) if !s.success() => {
            eprintln!("command exited with {s}; run {run_id} closed as aborted");
            return Ok(ExitCode::FAILURE);
        }
        _ => {}
    }
    Ok(ExitCode::SUCCESS)
}
