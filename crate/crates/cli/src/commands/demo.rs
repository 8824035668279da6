use std::hint::black_box;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use anyhow::Context;
use clap::Args;
use memscope_core::gateway::GatewayClient;
use memscope_core::registry::{CloseStatus, Hyperparameters, Marker, MarkerLabel};
use memscope_core::sampler::now_unix_ms;

use crate::GlobalArgs;

const MIB: usize = 1 << 20;

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Total memory to allocate, in MiB
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mib: u64,

    /// Number of equal allocation steps; each step is one epoch
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: u32,

    /// How long to hold the full allocation before exiting
    #[arg(long, default_value_t = 1000)]
    pub hold_ms: u64,

    /// Pause inside each step after allocating
    #[arg(long, default_value_t = 200)]
    pub step_ms: u64,

    /// Send epoch markers to the gateway. Without ADDR, uses
    /// $MEMSCOPE_GATEWAY or 127.0.0.1:<gateway-port>.
    #[arg(long, value_name = "ADDR", num_args = 0..=1, default_missing_value = "")]
    pub connect: Option<String>,
}

struct Reporter {
    client: GatewayClient,
    run_id: String,
    owns_run: bool,
}

impl Reporter {
    fn connect(global: &GlobalArgs, addr: &str, epochs: u32) -> anyhow::Result<Self> {
        let addr = match addr {
            "" => std::env::var("MEMSCOPE_GATEWAY").unwrap_or_else(|_| format!("127.0.0.1:{}", global.gateway_port)),
            a => a.to_owned(),
        };
        let mut client = GatewayClient::connect(&addr).with_context(|| format!("cannot reach gateway at {addr}"))?;
        let (run_id, owns_run) = match std::env::var("MEMSCOPE_RUN_ID") {
            Ok(id) if !id.is_empty() => (id, false),
            _ => {
                let hp = Hyperparameters {
                    model_name: "demo-workload".into(),
                    num_layers: 1,
                    nodes_per_layer: 1,
                    epochs,
                    dataset: "synthetic".into(),
                    input_quality: None,
                    extra: Default::default(),
                };
                (client.create_run(&hp)?, true)
            }
        };
        Ok(Self {
            client,
            run_id,
            owns_run,
        })
    }

    fn mark(&mut self, label: MarkerLabel, epoch: u32) -> anyhow::Result<()> {
        self.client.marker(&Marker {
            run_id: self.run_id.clone(),
            ts_unix_ms: now_unix_ms(),
            label,
            epoch: Some(epoch),
            note: None,
        })?;
        Ok(())
    }
}

/// Allocates `bytes` and writes one byte per page so the memory becomes
/// resident.
fn allocate(bytes: usize) -> anyhow::Result<Vec<u8>> {
    let mut buf: Vec<u8> = Vec::new();
    buf.try_reserve_exact(bytes)
        .with_context(|| format!("cannot allocate {bytes} bytes"))?;
    buf.resize(bytes, 0);
    for i in (0..bytes).step_by(4096) {
        buf[i] = 1;
    }
    Ok(black_box(buf))
}

pub fn run(global: &GlobalArgs, args: DemoArgs) -> anyhow::Result<ExitCode> {
    let total = usize::try_from(args.mib)
        .ok()
        .and_then(|m| m.checked_mul(MIB))
        .context("--mib is too large")?;
    let mut reporter = match &args.connect {
        Some(addr) => Some(Reporter::connect(global, addr, args.steps)?),
        None => None,
    };

    let steps = args.steps as usize;
    let mut held = Vec::with_capacity(steps);
    for step in 1..=args.steps {
        if let Some(r) = reporter.as_mut() {
            r.mark(MarkerLabel::EpochStart, step)?;
        }
        let chunk = total / steps + if step as usize == steps { total % steps } else { 0 };
        held.push(allocate(chunk)?);
        let resident: usize = held.iter().map(Vec::len).sum();
        eprintln!("step {step}/{}: {} MiB resident", args.steps, resident / MIB);
        thread::sleep(Duration::from_millis(args.step_ms));
        if let Some(r) = reporter.as_mut() {
            r.mark(MarkerLabel::EpochEnd, step)?;
        }
    }
    thread::sleep(Duration::from_millis(args.hold_ms));
    black_box(&held);
    drop(held);

    if let Some(mut r) = reporter {
        if r.owns_run {
            r.client.close_run(&r.run_id, CloseStatus::Closed)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
