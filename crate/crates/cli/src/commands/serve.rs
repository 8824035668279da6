use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::bail;
use memscope_core::gateway::{serve_events, RunObserver};
use memscope_core::live::LiveHub;
use memscope_core::registry::CloseStatus;
use memscope_core::sampler::{now_unix_ms, read_system_memory, StopReason};
use memscope_core::server::{http_api, AppState};
use memscope_core::session::{Recorder, Session};

use super::{close_dangling, interrupted, watch_interrupts};
use crate::GlobalArgs;

pub fn serve(global: &GlobalArgs) -> anyhow::Result<ExitCode> {
    let config = global.sampler_config(None);
    read_system_memory(&config, now_unix_ms())?;
    watch_interrupts()?;

    let (registry, store) = global.open()?;
    let hub = Arc::new(LiveHub::default());
    let recorder = Arc::new(Recorder::new(Arc::clone(&store), Some(Arc::clone(&hub))));
    let observer: Arc<dyn RunObserver> = recorder.clone();
    let gateway = serve_events(
        ("127.0.0.1", global.gateway_port),
        Arc::clone(&registry),
        Some(observer),
    )?;

    let runtime = tokio::runtime::Runtime::new()?;
    let state = AppState {
        registry: Arc::clone(&registry),
        store,
        hub,
        sampler_config: config.clone(),
        recorder: Some(Arc::clone(&recorder)),
    };
    let server = runtime.block_on(http_api(SocketAddr::from(([127, 0, 0, 1], global.port)), state))?;
    println!("listening on http://{}", server.local_addr());
    println!("marker gateway on {}", gateway.local_addr());

    let session = Session::start(config, Arc::clone(&recorder))?;
    while !interrupted() && !session.sampler_finished() {
        std::thread::sleep(Duration::from_millis(50));
    }

    runtime.block_on(server.shutdown());
    let report = session.stop();
    gateway.stop();
    close_dangling(&registry, &recorder, CloseStatus::Aborted);
    if let StopReason::Failed(e) = report.sampler.reason {
        bail!("sampling stopped: {e}");
    }
    Ok(ExitCode::SUCCESS)
}
