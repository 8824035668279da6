//! System and per-process memory sampling from the Linux `/proc` interface.
//!
//! [`parse_meminfo`] turns `meminfo` text into a [`MemorySnapshot`];
//! [`run_sampler`] drives a background thread that reads the counters at a
//! fixed cadence and hands each [`Reading`] to a [`ReadingSink`].

use std::collections::HashMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default kernel counter source.
pub const PROC_MEMINFO: &str = "/proc/meminfo";

/// Default sampling interval.
pub const DEFAULT_INTERVAL_MS: u64 = 500;

/// Smallest accepted sampling interval.
pub const MIN_INTERVAL_MS: u64 = 10;

const KIB: u64 = 1024;

/// One timestamped reading of system-wide memory counters, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub ts_unix_ms: i64,
    pub total_bytes: u64,
    pub available_bytes: u64,
    /// Always `total_bytes - available_bytes`.
    pub used_bytes: u64,
    pub used_percent: f64,
    pub active_bytes: u64,
    pub free_bytes: u64,
    pub swap_total_bytes: u64,
    pub swap_used_bytes: u64,
}

impl MemorySnapshot {
    /// Checks the counter relationships every snapshot must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        let total = self.total_bytes;
        if self.available_bytes > total {
            return Err(format!("available {} > total {}", self.available_bytes, total));
        }
        if self.free_bytes > total {
            return Err(format!("free {} > total {}", self.free_bytes, total));
        }
        if self.active_bytes > total {
            return Err(format!("active {} > total {}", self.active_bytes, total));
        }
        if self.used_bytes != total - self.available_bytes {
            return Err(format!(
                "used {} != total {} - available {}",
                self.used_bytes, total, self.available_bytes
            ));
        }
        if total > 0 {
            let expected = 100.0 * self.used_bytes as f64 / total as f64;
            if (self.used_percent - expected).abs() > 0.05 {
                return Err(format!("used_percent {} differs from {expected}", self.used_percent));
            }
        }
        if self.swap_used_bytes > self.swap_total_bytes {
            return Err(format!(
                "swap used {} > swap total {}",
                self.swap_used_bytes, self.swap_total_bytes
            ));
        }
        Ok(())
    }
}

/// One timestamped reading of a single process's memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSnapshot {
    pub ts_unix_ms: i64,
    pub pid: u32,
    pub rss_bytes: u64,
    pub vms_bytes: u64,
}

/// What the sampler loop produces on every tick.
///
/// The process half is stamped with the same clock reading as the system
/// half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub system: MemorySnapshot,
    pub process: Option<ProcessSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub interval_ms: u64,
    pub target_pid: Option<u32>,
    /// Overrides `/proc/meminfo`, mainly for fixture-driven tests.
    pub source_path: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            interval_ms: DEFAULT_INTERVAL_MS,
            target_pid: None,
            source_path: None,
        }
    }
}

impl SamplerConfig {
    pub fn with_interval_ms(interval_ms: u64) -> Self {
        Self {
            interval_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.interval_ms < MIN_INTERVAL_MS {
            return Err(SamplerError::IntervalTooShort(self.interval_ms));
        }
        if self.target_pid == Some(0) {
            return Err(SamplerError::InvalidPid(0));
        }
        Ok(())
    }

    pub fn source(&self) -> &Path {
        self.source_path.as_deref().unwrap_or_else(|| Path::new(PROC_MEMINFO))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplerError {
    #[error("required counter {0} missing from meminfo")]
    MissingCounter(&'static str),
    #[error("malformed meminfo line {0}")]
    MalformedLine(usize),
    #[error("MemTotal is zero")]
    ZeroTotal,
    #[error("counter source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("process {0} no longer exists")]
    ProcessGone(u32),
    #[error("invalid pid {0}")]
    InvalidPid(u32),
    #[error("sampling interval {0} ms is below the {MIN_INTERVAL_MS} ms minimum")]
    IntervalTooShort(u64),
}

/// Milliseconds since the Unix epoch according to the system clock.
pub fn now_unix_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

const REQUIRED: [&str; 6] = ["MemTotal", "MemFree", "MemAvailable", "Active", "SwapTotal", "SwapFree"];

/// Parses `meminfo`-formatted text (`Key: value kB` per line).
///
/// Every line must parse; blank lines are skipped. Values carrying a `kB`
/// unit are scaled to bytes, unitless values (the `HugePages_*` counts) are
/// kept as-is. A counter that exceeds `MemTotal` (or `SwapFree` exceeding
/// `SwapTotal`) is reported as a malformed line.
pub fn parse_meminfo(text: &str, ts_unix_ms: i64) -> Result<MemorySnapshot, SamplerError> {
    let mut counters: HashMap<&str, (u64, usize)> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(':').ok_or(SamplerError::MalformedLine(lineno))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(SamplerError::MalformedLine(lineno));
        }
        let mut parts = rest.split_whitespace();
        let value: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or(SamplerError::MalformedLine(lineno))?;
        let value = match (parts.next(), parts.next()) {
            (None, None) => value,
            (Some(unit), None) if unit.eq_ignore_ascii_case("kB") => {
                value.checked_mul(KIB).ok_or(SamplerError::MalformedLine(lineno))?
            }
            _ => return Err(SamplerError::MalformedLine(lineno)),
        };
        counters.insert(key, (value, lineno));
    }

    let mut values = [(0u64, 0usize); REQUIRED.len()];
    for (slot, name) in values.iter_mut().zip(REQUIRED) {
        *slot = *counters.get(name).ok_or(SamplerError::MissingCounter(name))?;
    }
    let [(total, _), (free, free_line), (available, avail_line), (active, active_line), (swap_total, _), (swap_free, swap_free_line)] =
        values;

    if total == 0 {
        return Err(SamplerError::ZeroTotal);
    }
    for (value, line) in [(free, free_line), (available, avail_line), (active, active_line)] {
        if value > total {
            return Err(SamplerError::MalformedLine(line));
        }
    }
    if swap_free > swap_total {
        return Err(SamplerError::MalformedLine(swap_free_line));
    }

    let used = total - available;
    Ok(MemorySnapshot {
        ts_unix_ms,
        total_bytes: total,
        available_bytes: available,
        used_bytes: used,
        used_percent: 100.0 * used as f64 / total as f64,
        active_bytes: active,
        free_bytes: free,
        swap_total_bytes: swap_total,
        swap_used_bytes: swap_total - swap_free,
    })
}

/// Reads the configured counter source and parses it.
///
/// Parse failures of the source are reported as they are; only I/O failures
/// map to [`SamplerError::SourceUnavailable`].
pub fn read_system_memory(config: &SamplerConfig, ts_unix_ms: i64) -> Result<MemorySnapshot, SamplerError> {
    let path = config.source();
    let text =
        fs::read_to_string(path).map_err(|e| SamplerError::SourceUnavailable(format!("{}: {e}", path.display())))?;
    parse_meminfo(&text, ts_unix_ms)
}

/// Reads `VmRSS` and `VmSize` from `/proc/<pid>/status`.
pub fn read_process_memory(pid: u32, ts_unix_ms: i64) -> Result<ProcessSnapshot, SamplerError> {
    if pid == 0 {
        return Err(SamplerError::InvalidPid(pid));
    }
    let status = fs::read_to_string(format!("/proc/{pid}/status")).map_err(|_| SamplerError::ProcessGone(pid))?;
    // Zombies keep a status file but drop their Vm* lines.
    let (rss_bytes, vms_bytes) = parse_process_status(&status).ok_or(SamplerError::ProcessGone(pid))?;
    Ok(ProcessSnapshot {
        ts_unix_ms,
        pid,
        rss_bytes,
        vms_bytes,
    })
}

/// Extracts `(VmRSS, VmSize)` in bytes from a `/proc/<pid>/status` body.
pub fn parse_process_status(status: &str) -> Option<(u64, u64)> {
    let mut rss = None;
    let mut vms = None;
    for line in status.lines() {
        let (key, rest) = match line.split_once(':') {
            Some(kv) => kv,
            None => continue,
        };
        let slot = match key {
            "VmRSS" => &mut rss,
            "VmSize" => &mut vms,
            _ => continue,
        };
        let kb: u64 = rest.split_whitespace().next()?.parse().ok()?;
        *slot = Some(kb * KIB);
    }
    let (rss, vms) = (rss?, vms?);
    Some((rss, vms.max(rss)))
}

/// Consumer of sampler output. Returning `Break` stops the sampler.
pub trait ReadingSink: Send + 'static {
    fn deliver(&mut self, reading: Reading) -> ControlFlow<()>;
}

impl<F> ReadingSink for F
where
    F: FnMut(Reading) -> ControlFlow<()> + Send + 'static,
{
    fn deliver(&mut self, reading: Reading) -> ControlFlow<()> {
        self(reading)
    }
}

impl ReadingSink for mpsc::Sender<Reading> {
    fn deliver(&mut self, reading: Reading) -> ControlFlow<()> {
        match self.send(reading) {
            Ok(()) => ControlFlow::Continue(()),
            Err(_) => ControlFlow::Break(()),
        }
    }
}

/// Why a sampler loop ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    Requested,
    SinkClosed,
    Failed(SamplerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerReport {
    pub delivered: u64,
    /// Ticks where the target process could not be read.
    pub process_gaps: u64,
    pub reason: StopReason,
}

/// Cloneable stop trigger usable from any thread.
#[derive(Debug, Clone)]
pub struct StopSignal(mpsc::Sender<()>);

impl StopSignal {
    pub fn stop(&self) {
        let _ = self.0.send(());
    }
}

/// Owns the sampler thread. Dropping the handle without calling
/// [`SamplerHandle::stop`] also stops the loop.
pub struct SamplerHandle {
    signal: StopSignal,
    thread: Option<JoinHandle<SamplerReport>>,
}

impl SamplerHandle {
    pub fn signal(&self) -> StopSignal {
        self.signal.clone()
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(JoinHandle::is_finished)
    }

    /// Stops the loop and waits for it to exit.
    pub fn stop(mut self) -> SamplerReport {
        self.signal.stop();
        self.join_inner()
    }

    /// Waits for the loop to end on its own (sink closed or failure).
    pub fn join(mut self) -> SamplerReport {
        self.join_inner()
    }

    fn join_inner(&mut self) -> SamplerReport {
        match self.thread.take().map(JoinHandle::join) {
            Some(Ok(report)) => report,
            Some(Err(_)) => SamplerReport {
                delivered: 0,
                process_gaps: 0,
                reason: StopReason::Failed(SamplerError::SourceUnavailable("sampler thread panicked".into())),
            },
            None => SamplerReport {
                delivered: 0,
                process_gaps: 0,
                reason: StopReason::Requested,
            },
        }
    }
}

impl Drop for SamplerHandle {
    fn drop(&mut self) {
        if let Some(thread) = self.thread.take() {
            self.signal.stop();
            let _ = thread.join();
        }
    }
}

/// Starts sampling on a dedicated thread.
///
/// Ticks are scheduled against absolute deadlines so the cadence does not
/// drift with read latency. Timestamps are forced strictly increasing even if
/// the wall clock steps backwards. A vanished target process is recorded as
/// a gap and not polled again; an unreadable counter source ends the loop
/// with [`StopReason::Failed`].
pub fn run_sampler<S: ReadingSink>(config: SamplerConfig, mut sink: S) -> Result<SamplerHandle, SamplerError> {
    config.validate()?;
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let interval = Duration::from_millis(config.interval_ms);

    let thread = thread::Builder::new()
        .name("memscope-sampler".into())
        .spawn(move || {
            let mut delivered = 0u64;
            let mut process_gaps = 0u64;
            let mut target = config.target_pid;
            let mut last_ts = i64::MIN;
            let start = Instant::now();
            let mut tick: u32 = 0;

            let reason = loop {
                match stop_rx.try_recv() {
                    Ok(()) | Err(mpsc::TryRecvError::Disconnected) => break StopReason::Requested,
                    Err(mpsc::TryRecvError::Empty) => {}
                }

                let ts = now_unix_ms().max(last_ts.saturating_add(1));
                let system = match read_system_memory(&config, ts) {
                    Ok(s) => s,
                    Err(e) => break StopReason::Failed(e),
                };
                let process = match target {
                    Some(pid) => match read_process_memory(pid, ts) {
                        Ok(p) => Some(p),
                        Err(_) => {
                            tracing::info!(pid, "target process gone, continuing system sampling");
                            target = None;
                            process_gaps += 1;
                            None
                        }
                    },
                    None => {
                        if config.target_pid.is_some() {
                            process_gaps += 1;
                        }
                        None
                    }
                };
                last_ts = ts;
                if sink.deliver(Reading { system, process }).is_break() {
                    break StopReason::SinkClosed;
                }
                delivered += 1;

                tick += 1;
                let deadline = start + interval * tick;
                let wait = deadline.saturating_duration_since(Instant::now());
                match stop_rx.recv_timeout(wait) {
                    Ok(()) | Err(RecvTimeoutError::Disconnected) => break StopReason::Requested,
                    Err(RecvTimeoutError::Timeout) => {}
                }
            };
            SamplerReport {
                delivered,
                process_gaps,
                reason,
            }
        })
        .map_err(|e| SamplerError::SourceUnavailable(format!("spawn sampler thread: {e}")))?;

    Ok(SamplerHandle {
        signal: StopSignal(stop_tx),
        thread: Some(thread),
    })
}
