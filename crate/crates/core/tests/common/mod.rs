#![allow(dead_code)]

pub mod oracle;
pub mod schema;

use memscope_core::layout::DataDir;
use memscope_core::registry::{Hyperparameters, Registry};
use memscope_core::sampler::{MemorySnapshot, ProcessSnapshot};
use memscope_core::store::{SampleRecord, Store, StoreOptions};

pub fn hp(model: &str) -> Hyperparameters {
    Hyperparameters {
        model_name: model.into(),
        num_layers: 3,
        nodes_per_layer: 128,
        epochs: 10,
        dataset: "mnist".into(),
        input_quality: None,
        extra: Default::default(),
    }
}

pub fn snapshot(ts: i64, total: u64, used: u64) -> MemorySnapshot {
    MemorySnapshot {
        ts_unix_ms: ts,
        total_bytes: total,
        available_bytes: total - used,
        used_bytes: used,
        used_percent: 100.0 * used as f64 / total as f64,
        active_bytes: used / 3,
        free_bytes: (total - used) / 2,
        swap_total_bytes: 1 << 30,
        swap_used_bytes: used % (1 << 30),
    }
}

pub fn record(run_id: &str, ts: i64, used: u64, rss: Option<u64>) -> SampleRecord {
    SampleRecord {
        run_id: run_id.into(),
        system: snapshot(ts, 1 << 40, used),
        process: rss.map(|rss| ProcessSnapshot {
            ts_unix_ms: ts,
            pid: 4242,
            rss_bytes: rss,
            vms_bytes: rss * 2 + 1,
        }),
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub registry: Registry,
    pub store: Store,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_sync(true)
    }

    pub fn with_sync(sync_each_append: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = DataDir::new(dir.path());
        let registry = Registry::open(data.clone()).unwrap();
        let store = Store::open_with(data, StoreOptions { sync_each_append }).unwrap();
        Self { dir, registry, store }
    }

    pub fn run(&self, model: &str) -> String {
        self.registry.create_run(hp(model), 0).unwrap().run_id
    }
}
