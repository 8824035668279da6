//! Wires the sampler to storage and the live hub.
//!
//! The sampler thread only produces readings. A separate recorder thread
//! appends each reading to every attached run and then publishes it to the
//! live hub, so neither disk latency nor slow subscribers touch the sampling
//! cadence. Shutdown is ordered: the sampler stops first, the recorder drains
//! what is left in the channel, and only then may the caller close runs.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::gateway::RunObserver;
use crate::live::{LiveFrame, LiveHub};
use crate::registry::RunRecord;
use crate::sampler::{run_sampler, Reading, SamplerConfig, SamplerError, SamplerHandle, SamplerReport, StopSignal};
use crate::store::{SampleRecord, Store};

/// Routes readings into the runs currently being recorded.
pub struct Recorder {
    store: Arc<Store>,
    hub: Option<Arc<LiveHub>>,
    /// Attached runs in attach order; the newest one labels live frames.
    active: Mutex<Vec<String>>,
}

impl Recorder {
    pub fn new(store: Arc<Store>, hub: Option<Arc<LiveHub>>) -> Self {
        Self {
            store,
            hub,
            active: Mutex::new(Vec::new()),
        }
    }

    pub fn attach(&self, run_id: &str) {
        let mut active = self.active.lock().unwrap();
        if !active.iter().any(|r| r == run_id) {
            active.push(run_id.to_owned());
        }
    }

    pub fn detach(&self, run_id: &str) {
        self.active.lock().unwrap().retain(|r| r != run_id);
    }

    pub fn active_runs(&self) -> Vec<String> {
        self.active.lock().unwrap().clone()
    }

    /// Persists `reading` to every attached run, then publishes it. Returns
    /// the number of failed appends.
    pub fn record(&self, reading: Reading) -> RecordOutcome {
        let runs = self.active_runs();
        let mut outcome = RecordOutcome::default();
        for run_id in &runs {
            match self.store.append(run_id, &SampleRecord::new(run_id.clone(), reading)) {
                Ok(()) => outcome.appended += 1,
                Err(e) => {
                    tracing::warn!(run_id, "dropping sample: {e}");
                    outcome.failed += 1;
                }
            }
        }
        if let Some(hub) = &self.hub {
            hub.publish(LiveFrame {
                run_id: runs.last().cloned(),
                sample: reading,
            });
        }
        outcome
    }
}

impl RunObserver for Recorder {
    fn run_created(&self, run: &RunRecord) {
        self.attach(&run.run_id);
    }

    fn run_closed(&self, run: &RunRecord) {
        self.detach(&run.run_id);
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RecordOutcome {
    pub appended: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionReport {
    pub sampler: SamplerReport,
    pub readings: u64,
    pub appended: u64,
    pub failed_appends: u64,
}

/// A running sampler plus its recorder thread.
pub struct Session {
    sampler: SamplerHandle,
    recorder: JoinHandle<(u64, RecordOutcome)>,
}

impl Session {
    pub fn start(config: SamplerConfig, recorder: Arc<Recorder>) -> Result<Self, SamplerError> {
        let (tx, rx) = mpsc::channel::<Reading>();
        let sampler = run_sampler(config, tx)?;
        let recorder = thread::Builder::new()
            .name("memscope-recorder".into())
            .spawn(move || {
                let mut readings = 0;
                let mut total = RecordOutcome::default();
                for reading in rx {
                    readings += 1;
                    let o = recorder.record(reading);
                    total.appended += o.appended;
                    total.failed += o.failed;
                }
                (readings, total)
            })
            .map_err(|e| SamplerError::SourceUnavailable(format!("spawn recorder thread: {e}")))?;
        Ok(Self { sampler, recorder })
    }

    pub fn signal(&self) -> StopSignal {
        self.sampler.signal()
    }

    /// True once the sampler loop has ended on its own (e.g. source failure).
    pub fn sampler_finished(&self) -> bool {
        self.sampler.is_finished()
    }

    /// Stops sampling, drains pending readings into the store, and reports.
    pub fn stop(self) -> SessionReport {
        let sampler = self.sampler.stop();
        let (readings, outcome) = self.recorder.join().unwrap_or_default();
        SessionReport {
            sampler,
            readings,
            appended: outcome.appended,
            failed_appends: outcome.failed,
        }
    }
}
