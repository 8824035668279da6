//! Memory profiling for machine-learning training runs.
//!
//! A [`sampler`] reads system and per-process memory counters on a fixed
//! cadence. Readings are persisted per run by the [`store`], tagged with the
//! hyperparameters held in the [`registry`], and exposed through the
//! [`server`] together with the summaries computed by [`analysis`]. Training
//! processes report run lifecycle and epoch markers over the [`gateway`].

pub mod analysis;
pub mod gateway;
pub mod layout;
pub mod live;
pub mod registry;
pub mod sampler;
pub mod server;
pub mod session;
pub mod store;

pub use analysis::{compare_runs, epoch_breakdown, run_summary, AnalysisError, CompareReport, EpochStat, RunSummary};
pub use layout::DataDir;
pub use registry::{CloseStatus, Hyperparameters, Marker, MarkerLabel, Registry, RunFilter, RunRecord, RunStatus};
pub use sampler::{MemorySnapshot, ProcessSnapshot, Reading, SamplerConfig};
pub use store::{Bucket, SampleRecord, Store};
