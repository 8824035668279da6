pub mod demo;
pub mod inspect;
pub mod record;
pub mod serve;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use memscope_core::registry::{CloseStatus, Registry, RegistryError};
use memscope_core::sampler::now_unix_ms;
use memscope_core::session::Recorder;

/// Bad flag values detected after argument parsing; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// Installs the SIGINT/SIGTERM handler; afterwards [`interrupted`] reports
/// whether a signal arrived.
pub fn watch_interrupts() -> anyhow::Result<()> {
    ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst))?;
    Ok(())
}

pub fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}

/// Closes every run still attached to `recorder`.
pub fn close_dangling(registry: &Registry, recorder: &Arc<Recorder>, status: CloseStatus) {
    for run_id in recorder.active_runs() {
        recorder.detach(&run_id);
        match registry.close_run(&run_id, status, now_unix_ms()) {
            Ok(_) | Err(RegistryError::AlreadyClosed(_)) => {}
            Err(e) => tracing::warn!(run_id, "cannot close run: {e}"),
        }
    }
}
