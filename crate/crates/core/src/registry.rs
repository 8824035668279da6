//! Training runs, their hyperparameters, and timeline markers.
//!
//! Each run is persisted as `runs/<run_id>/manifest` plus an append-only
//! `markers.ndjson`. Mutations are serialized behind one write lock; readers
//! share a read lock and see the last committed state.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::sync::RwLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::layout::{self, DataDir, FORMAT_VERSION};

/// Longest accepted free-text field, in characters.
pub const MAX_TEXT_LEN: usize = 256;

/// A field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {reason}")]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid {0}")]
    Validation(#[from] FieldError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is already closed")]
    AlreadyClosed(String),
    #[error("run {0} is closed")]
    RunClosed(String),
    #[error("run {run_id} has format_version {found}, newest supported is {FORMAT_VERSION}")]
    UnsupportedVersion { run_id: String, found: u32 },
    #[error("corrupt manifest for run {run_id}: {reason}")]
    CorruptManifest { run_id: String, reason: String },
    #[error("registry i/o: {0}")]
    Io(#[from] io::Error),
}

/// Operator-entered configuration that distinguishes one trained model from
/// another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub model_name: String,
    pub num_layers: u32,
    pub nodes_per_layer: u32,
    pub epochs: u32,
    pub dataset: String,
    #[serde(default)]
    pub input_quality: Option<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

const HP_FIELDS: [&str; 7] = [
    "model_name",
    "num_layers",
    "nodes_per_layer",
    "epochs",
    "dataset",
    "input_quality",
    "extra",
];

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), FieldError> {
        check_text("model_name", &self.model_name, true)?;
        check_text("dataset", &self.dataset, false)?;
        if let Some(q) = &self.input_quality {
            check_text("input_quality", q, false)?;
        }
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("nodes_per_layer", self.nodes_per_layer),
            ("epochs", self.epochs),
        ] {
            if value < 1 {
                return Err(FieldError::new(name, "must be at least 1"));
            }
        }
        for (k, v) in &self.extra {
            let field = format!("extra.{k}");
            if k.is_empty() {
                return Err(FieldError::new("extra", "empty key"));
            }
            check_text(&field, k, true)?;
            check_text(&field, v, false)?;
        }
        Ok(())
    }

    /// Builds and validates hyperparameters from a JSON object, naming the
    /// offending field on failure. Keys listed in `passthrough` are skipped;
    /// any other unrecognized key is an error.
    pub fn from_json_map(map: &Map<String, Value>, passthrough: &[&str]) -> Result<Self, FieldError> {
        if let Some(k) = map
            .keys()
            .find(|k| !HP_FIELDS.contains(&k.as_str()) && !passthrough.contains(&k.as_str()))
        {
            return Err(FieldError::new(k.as_str(), "unknown field"));
        }
        let extra = match map.get("extra") {
            None | Some(Value::Null) => BTreeMap::new(),
            Some(Value::Object(o)) => o
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    _ => Err(FieldError::new(format!("extra.{k}"), "expected a string")),
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(FieldError::new("extra", "expected an object")),
        };
        let hp = Self {
            model_name: req_str(map, "model_name")?,
            num_layers: req_u32(map, "num_layers")?,
            nodes_per_layer: req_u32(map, "nodes_per_layer")?,
            epochs: req_u32(map, "epochs")?,
            dataset: req_str(map, "dataset")?,
            input_quality: opt_str(map, "input_quality")?,
            extra,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Flattened `field -> value` view used for run comparison. `extra`
    /// entries appear as `extra.<key>`.
    pub fn fields(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        out.insert("model_name".into(), Value::from(self.model_name.clone()));
        out.insert("num_layers".into(), Value::from(self.num_layers));
        out.insert("nodes_per_layer".into(), Value::from(self.nodes_per_layer));
        out.insert("epochs".into(), Value::from(self.epochs));
        out.insert("dataset".into(), Value::from(self.dataset.clone()));
        out.insert(
            "input_quality".into(),
            self.input_quality.clone().map_or(Value::Null, Value::from),
        );
        for (k, v) in &self.extra {
            out.insert(format!("extra.{k}"), Value::from(v.clone()));
        }
        out
    }
}

fn check_text(field: &str, value: &str, required: bool) -> Result<(), FieldError> {
    if required && value.trim().is_empty() {
        return Err(FieldError::new(field, "must not be empty"));
    }
    if value.chars().count() > MAX_TEXT_LEN {
        return Err(FieldError::new(field, format!("longer than {MAX_TEXT_LEN} characters")));
    }
    if value.chars().any(char::is_control) {
        return Err(FieldError::new(field, "contains control characters"));
    }
    Ok(())
}

pub(crate) fn req_str(map: &Map<String, Value>, field: &str) -> Result<String, FieldError> {
    match map.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(FieldError::new(field, "expected a string")),
        None => Err(FieldError::new(field, "missing")),
    }
}

pub(crate) fn opt_str(map: &Map<String, Value>, field: &str) -> Result<Option<String>, FieldError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(FieldError::new(field, "expected a string")),
    }
}

pub(crate) fn opt_u64(map: &Map<String, Value>, field: &str) -> Result<Option<u64>, FieldError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| FieldError::new(field, "expected a non-negative integer")),
    }
}

pub(crate) fn opt_i64(map: &Map<String, Value>, field: &str) -> Result<Option<i64>, FieldError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_i64()
            .map(Some)
            .ok_or_else(|| FieldError::new(field, "expected an integer")),
    }
}

fn req_u32(map: &Map<String, Value>, field: &str) -> Result<u32, FieldError> {
    let v = opt_u64(map, field)?.ok_or_else(|| FieldError::new(field, "missing"))?;
    u32::try_from(v).map_err(|_| FieldError::new(field, "out of range"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Recording,
    Closed,
    Aborted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Recording => "recording",
            Self::Closed => "closed",
            Self::Aborted => "aborted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recording" => Some(Self::Recording),
            "closed" => Some(Self::Closed),
            "aborted" => Some(Self::Aborted),
            _ => None,
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Terminal status accepted by [`Registry::close_run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseStatus {
    Closed,
    Aborted,
}

impl From<CloseStatus> for RunStatus {
    fn from(s: CloseStatus) -> Self {
        match s {
            CloseStatus::Closed => RunStatus::Closed,
            CloseStatus::Aborted => RunStatus::Aborted,
        }
    }
}

impl CloseStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "closed" => Some(Self::Closed),
            "aborted" => Some(Self::Aborted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: i64,
    pub closed_at: Option<i64>,
    pub hyperparameters: Hyperparameters,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_recording(&self) -> bool {
        self.status == RunStatus::Recording
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerLabel {
    EpochStart,
    EpochEnd,
    Phase,
}

impl MarkerLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EpochStart => "epoch_start",
            Self::EpochEnd => "epoch_end",
            Self::Phase => "phase",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epoch_start" => Some(Self::EpochStart),
            "epoch_end" => Some(Self::EpochEnd),
            "phase" => Some(Self::Phase),
            _ => None,
        }
    }
}

impl std::fmt::Display for MarkerLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A training-phase event on a run's timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub run_id: String,
    pub ts_unix_ms: i64,
    pub label: MarkerLabel,
    pub epoch: Option<u32>,
    pub note: Option<String>,
}

const MARKER_FIELDS: [&str; 5] = ["run_id", "ts_unix_ms", "label", "epoch", "note"];

impl Marker {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !layout::is_valid_run_id(&self.run_id) {
            return Err(FieldError::new("run_id", "not a valid run id"));
        }
        if matches!(self.label, MarkerLabel::EpochStart | MarkerLabel::EpochEnd) && self.epoch.is_none() {
            return Err(FieldError::new("epoch", "required for epoch markers"));
        }
        if let Some(note) = &self.note {
            check_text("note", note, false)?;
        }
        Ok(())
    }

    /// Builds a marker from a JSON object. `run_id` overrides (or supplies)
    /// the object's `run_id`; a missing `ts_unix_ms` becomes `default_ts`.
    pub fn from_json_map(
        map: &Map<String, Value>,
        run_id: Option<&str>,
        default_ts: i64,
        passthrough: &[&str],
    ) -> Result<Self, FieldError> {
        if let Some(k) = map
            .keys()
            .find(|k| !MARKER_FIELDS.contains(&k.as_str()) && !passthrough.contains(&k.as_str()))
        {
            return Err(FieldError::new(k.as_str(), "unknown field"));
        }
        let run_id = match run_id {
            Some(id) => id.to_owned(),
            None => req_str(map, "run_id")?,
        };
        let label = req_str(map, "label")?;
        let label =
            MarkerLabel::parse(&label).ok_or_else(|| FieldError::new("label", format!("unknown label {label:?}")))?;
        let epoch = opt_u64(map, "epoch")?
            .map(|e| u32::try_from(e).map_err(|_| FieldError::new("epoch", "out of range")))
            .transpose()?;
        let marker = Self {
            run_id,
            ts_unix_ms: opt_i64(map, "ts_unix_ms")?.unwrap_or(default_ts),
            label,
            epoch,
            note: opt_str(map, "note")?,
        };
        marker.validate()?;
        Ok(marker)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    run: RunRecord,
    #[serde(default)]
    target_pid: Option<u32>,
}

#[derive(Debug, Clone)]
struct RunEntry {
    record: RunRecord,
    markers: Vec<Marker>,
    target_pid: Option<u32>,
}

#[derive(Debug, Default)]
struct State {
    /// Runs written by this instance; authoritative.
    owned: HashMap<String, RunEntry>,
}

/// Optional filter for [`Registry::list_runs`].
#[derive(Debug, Clone, Default)]
pub struct RunFilter {
    pub status: Option<RunStatus>,
    pub model_name: Option<String>,
}

/// Persistent registry of runs under a data directory.
///
/// Runs created or modified through this instance are cached. Runs on disk
/// that another process wrote are re-read on every access so a long-lived
/// server sees recordings made by separate `record` processes.
#[derive(Debug)]
pub struct Registry {
    dir: DataDir,
    state: RwLock<State>,
}

impl Registry {
    pub fn open(dir: DataDir) -> Result<Self, RegistryError> {
        fs::create_dir_all(dir.runs_dir())?;
        Ok(Self {
            dir,
            state: RwLock::new(State::default()),
        })
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.dir
    }

    pub fn create_run(&self, hp: Hyperparameters, now: i64) -> Result<RunRecord, RegistryError> {
        hp.validate()?;
        let mut state = self.state.write().unwrap();
        let run_id = loop {
            let candidate = format!("{now}-{:08x}", rand::rng().random::<u32>());
            if !state.owned.contains_key(&candidate) && !self.dir.run_exists(&candidate) {
                break candidate;
            }
        };
        let record = RunRecord {
            run_id: run_id.clone(),
            created_at: now,
            closed_at: None,
            hyperparameters: hp,
            status: RunStatus::Recording,
        };
        let entry = RunEntry {
            record: record.clone(),
            markers: Vec::new(),
            target_pid: None,
        };
        fs::create_dir_all(self.dir.run_dir(&run_id).expect("generated ids are valid"))?;
        self.write_manifest(&entry)?;
        state.owned.insert(run_id, entry);
        Ok(record)
    }

    pub fn close_run(&self, run_id: &str, status: CloseStatus, now: i64) -> Result<RunRecord, RegistryError> {
        let mut state = self.state.write().unwrap();
        let entry = self.owned_entry(&mut state, run_id)?;
        if !entry.record.is_recording() {
            return Err(RegistryError::AlreadyClosed(run_id.to_owned()));
        }
        let mut updated = entry.clone();
        updated.record.status = status.into();
        updated.record.closed_at = Some(now.max(updated.record.created_at));
        self.write_manifest(&updated)?;
        *entry = updated;
        Ok(entry.record.clone())
    }

    /// Appends a marker; out-of-order timestamps are inserted in sorted
    /// position after any markers with the same timestamp.
    pub fn add_marker(&self, marker: Marker) -> Result<(), RegistryError> {
        marker.validate()?;
        let mut state = self.state.write().unwrap();
        let entry = self.owned_entry(&mut state, &marker.run_id)?;
        if !entry.record.is_recording() {
            return Err(RegistryError::RunClosed(marker.run_id));
        }
        let path = self.dir.markers_path(&marker.run_id).expect("validated");
        let mut line = serde_json::to_vec(&marker).expect("marker serializes");
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&line)?;
        f.sync_data()?;
        let pos = entry.markers.partition_point(|m| m.ts_unix_ms <= marker.ts_unix_ms);
        entry.markers.insert(pos, marker);
        Ok(())
    }

    /// Records which process a run monitors (used to restore `pid` when
    /// importing CSV, which carries no pid column).
    pub fn set_target_pid(&self, run_id: &str, pid: Option<u32>) -> Result<(), RegistryError> {
        let mut state = self.state.write().unwrap();
        let entry = self.owned_entry(&mut state, run_id)?;
        let mut updated = entry.clone();
        updated.target_pid = pid;
        self.write_manifest(&updated)?;
        *entry = updated;
        Ok(())
    }

    pub fn target_pid(&self, run_id: &str) -> Result<Option<u32>, RegistryError> {
        self.with_entry(run_id, |e| e.target_pid)
    }

    pub fn get(&self, run_id: &str) -> Result<RunRecord, RegistryError> {
        self.with_entry(run_id, |e| e.record.clone())
    }

    pub fn markers(&self, run_id: &str) -> Result<Vec<Marker>, RegistryError> {
        self.with_entry(run_id, |e| e.markers.clone())
    }

    /// Runs matching `filter`, newest first.
    pub fn list_runs(&self, filter: &RunFilter) -> Result<Vec<RunRecord>, RegistryError> {
        let mut ids: HashSet<String> = HashSet::new();
        match fs::read_dir(self.dir.runs_dir()) {
            Ok(rd) => {
                for entry in rd {
                    let name = entry?.file_name();
                    if let Some(name) = name.to_str() {
                        if self.dir.run_exists(name) {
                            ids.insert(name.to_owned());
                        }
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let state = self.state.read().unwrap();
        ids.extend(state.owned.keys().cloned());
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let record = match state.owned.get(&id) {
                Some(e) => e.record.clone(),
                None => match self.load(&id) {
                    Ok(e) => e.record,
                    Err(RegistryError::UnknownRun(_)) => continue,
                    Err(e) => return Err(e),
                },
            };
            let keep = filter.status.is_none_or(|s| s == record.status)
                && filter
                    .model_name
                    .as_deref()
                    .is_none_or(|m| m == record.hyperparameters.model_name);
            if keep {
                out.push(record);
            }
        }
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.run_id.cmp(&a.run_id)));
        Ok(out)
    }

    fn with_entry<T>(&self, run_id: &str, f: impl FnOnce(&RunEntry) -> T) -> Result<T, RegistryError> {
        {
            let state = self.state.read().unwrap();
            if let Some(e) = state.owned.get(run_id) {
                return Ok(f(e));
            }
        }
        self.load(run_id).map(|e| f(&e))
    }

    fn owned_entry<'a>(&self, state: &'a mut State, run_id: &str) -> Result<&'a mut RunEntry, RegistryError> {
        if !state.owned.contains_key(run_id) {
            let entry = self.load(run_id)?;
            state.owned.insert(run_id.to_owned(), entry);
        }
        Ok(state.owned.get_mut(run_id).expect("inserted above"))
    }

    fn load(&self, run_id: &str) -> Result<RunEntry, RegistryError> {
        let unknown = || RegistryError::UnknownRun(run_id.to_owned());
        let path = self.dir.manifest_path(run_id).ok_or_else(unknown)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(unknown()),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: String| RegistryError::CorruptManifest {
            run_id: run_id.to_owned(),
            reason,
        };
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| corrupt("missing format_version".into()))?;
        if version > u64::from(FORMAT_VERSION) {
            return Err(RegistryError::UnsupportedVersion {
                run_id: run_id.to_owned(),
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;

        let mut markers = Vec::new();
        let markers_path = self.dir.markers_path(run_id).ok_or_else(unknown)?;
        match fs::read(&markers_path) {
            Ok(bytes) => {
                for (lineno, line) in layout::complete_lines(&bytes) {
                    match serde_json::from_slice::<Marker>(line) {
                        Ok(m) => markers.push(m),
                        Err(e) => tracing::warn!(run_id, lineno, "skipping bad marker line: {e}"),
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        markers.sort_by_key(|m| m.ts_unix_ms);
        Ok(RunEntry {
            record: manifest.run,
            markers,
            target_pid: manifest.target_pid,
        })
    }

    fn write_manifest(&self, entry: &RunEntry) -> Result<(), RegistryError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            run: entry.record.clone(),
            target_pid: entry.target_pid,
        };
        let path = self
            .dir
            .manifest_path(&entry.record.run_id)
            .ok_or_else(|| RegistryError::UnknownRun(entry.record.run_id.clone()))?;
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        layout::write_atomic(&path, &bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub(crate) fn mlp() -> Hyperparameters {
        Hyperparameters {
            model_name: "mlp".into(),
            num_layers: 3,
            nodes_per_layer: 128,
            epochs: 10,
            dataset: "mnist".into(),
            input_quality: None,
            extra: BTreeMap::new(),
        }
    }

    fn registry() -> (tempfile::TempDir, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(DataDir::new(dir.path())).unwrap();
        (dir, reg)
    }

    fn marker(run_id: &str, ts: i64, label: MarkerLabel, epoch: Option<u32>) -> Marker {
        Marker {
            run_id: run_id.into(),
            ts_unix_ms: ts,
            label,
            epoch,
            note: None,
        }
    }

    #[test]
    fn create_run_is_recording_and_unique() {
        let (_d, reg) = registry();
        let a = reg.create_run(mlp(), 1000).unwrap();
        let b = reg.create_run(mlp(), 1000).unwrap();
        assert_eq!(a.status, RunStatus::Recording);
        assert_eq!(a.closed_at, None);
        assert_ne!(a.run_id, b.run_id);
        assert!(a.run_id.starts_with("1000-"));
    }

    #[test]
    fn zero_layers_rejected() {
        let (_d, reg) = registry();
        let hp = Hyperparameters { num_layers: 0, ..mlp() };
        match reg.create_run(hp, 0) {
            Err(RegistryError::Validation(f)) => assert_eq!(f.field, "num_layers"),
            other => panic!("{other:?}"),
        }
        let hp = Hyperparameters {
            model_name: " ".into(),
            ..mlp()
        };
        match reg.create_run(hp, 0) {
            Err(RegistryError::Validation(f)) => assert_eq!(f.field, "model_name"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn close_semantics() {
        let (_d, reg) = registry();
        let run = reg.create_run(mlp(), 10).unwrap();
        let closed = reg.close_run(&run.run_id, CloseStatus::Closed, 20).unwrap();
        assert_eq!(closed.closed_at, Some(20));
        assert_eq!(closed.status, RunStatus::Closed);
        assert!(matches!(
            reg.close_run(&run.run_id, CloseStatus::Aborted, 30),
            Err(RegistryError::AlreadyClosed(_))
        ));
        assert!(matches!(
            reg.close_run("no-such-id", CloseStatus::Closed, 30),
            Err(RegistryError::UnknownRun(_))
        ));
    }

    #[test]
    fn marker_rules() {
        let (_d, reg) = registry();
        let run = reg.create_run(mlp(), 10).unwrap();
        reg.add_marker(marker(&run.run_id, 11, MarkerLabel::EpochStart, Some(0)))
            .unwrap();
        match reg.add_marker(marker(&run.run_id, 12, MarkerLabel::EpochStart, None)) {
            Err(RegistryError::Validation(f)) => assert_eq!(f.field, "epoch"),
            other => panic!("{other:?}"),
        }
        reg.add_marker(marker(&run.run_id, 12, MarkerLabel::Phase, None))
            .unwrap();
        reg.close_run(&run.run_id, CloseStatus::Closed, 20).unwrap();
        assert!(matches!(
            reg.add_marker(marker(&run.run_id, 21, MarkerLabel::Phase, None)),
            Err(RegistryError::RunClosed(_))
        ));
        assert!(matches!(
            reg.add_marker(marker("nope", 21, MarkerLabel::Phase, None)),
            Err(RegistryError::UnknownRun(_))
        ));
    }

    #[test]
    fn out_of_order_markers_are_sorted() {
        let (_d, reg) = registry();
        let id = reg.create_run(mlp(), 0).unwrap().run_id;
        for ts in [50, 10, 30, 10, 70] {
            reg.add_marker(marker(&id, ts, MarkerLabel::Phase, None)).unwrap();
        }
        let ts: Vec<i64> = reg.markers(&id).unwrap().iter().map(|m| m.ts_unix_ms).collect();
        assert_eq!(ts, vec![10, 10, 30, 50, 70]);
        let reopened = Registry::open(reg.data_dir().clone()).unwrap();
        let ts: Vec<i64> = reopened.markers(&id).unwrap().iter().map(|m| m.ts_unix_ms).collect();
        assert_eq!(ts, vec![10, 10, 30, 50, 70]);
    }

    #[test]
    fn list_runs_filters_newest_first() {
        let (_d, reg) = registry();
        assert!(reg.list_runs(&RunFilter::default()).unwrap().is_empty());
        let a = reg.create_run(mlp(), 100).unwrap();
        let _cnn = reg
            .create_run(
                Hyperparameters {
                    model_name: "cnn".into(),
                    ..mlp()
                },
                200,
            )
            .unwrap();
        let c = reg.create_run(mlp(), 300).unwrap();
        let only_mlp = reg
            .list_runs(&RunFilter {
                model_name: Some("mlp".into()),
                ..RunFilter::default()
            })
            .unwrap();
        let ids: Vec<_> = only_mlp.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, vec![c.run_id.as_str(), a.run_id.as_str()]);
        assert_eq!(reg.list_runs(&RunFilter::default()).unwrap().len(), 3);
        reg.close_run(&a.run_id, CloseStatus::Closed, 400).unwrap();
        let recording = reg
            .list_runs(&RunFilter {
                status: Some(RunStatus::Recording),
                ..RunFilter::default()
            })
            .unwrap();
        assert_eq!(recording.len(), 2);
    }

    #[test]
    fn records_round_trip_through_disk() {
        let (_d, reg) = registry();
        let mut hp = mlp();
        hp.input_quality = Some("28x28 grayscale".into());
        hp.extra.insert("optimizer".into(), "adam".into());
        let created = reg.create_run(hp, 5).unwrap();
        let reopened = Registry::open(reg.data_dir().clone()).unwrap();
        assert_eq!(reopened.get(&created.run_id).unwrap(), created);
    }

    #[test]
    fn runs_from_other_instances_are_visible() {
        let (_d, reg) = registry();
        let other = Registry::open(reg.data_dir().clone()).unwrap();
        let run = other.create_run(mlp(), 5).unwrap();
        assert_eq!(reg.get(&run.run_id).unwrap(), run);
        other.close_run(&run.run_id, CloseStatus::Closed, 9).unwrap();
        assert_eq!(reg.get(&run.run_id).unwrap().status, RunStatus::Closed);
    }

    #[test]
    fn newer_format_version_is_rejected() {
        let (_d, reg) = registry();
        let run = reg.create_run(mlp(), 5).unwrap();
        let path = reg.data_dir().manifest_path(&run.run_id).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        let fresh = Registry::open(reg.data_dir().clone()).unwrap();
        assert!(matches!(
            fresh.get(&run.run_id),
            Err(RegistryError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn hyperparameters_from_json_name_fields() {
        let ok = json!({"model_name":"mlp","num_layers":3,"nodes_per_layer":128,"epochs":10,"dataset":"mnist"});
        assert_eq!(
            Hyperparameters::from_json_map(ok.as_object().unwrap(), &[]).unwrap(),
            mlp()
        );
        let cases = [
            (
                json!({"model_name":"mlp","nodes_per_layer":1,"epochs":1,"dataset":""}),
                "num_layers",
            ),
            (
                json!({"model_name":"mlp","num_layers":-1,"nodes_per_layer":1,"epochs":1,"dataset":""}),
                "num_layers",
            ),
            (
                json!({"model_name":"mlp","num_layers":1,"nodes_per_layer":1,"epochs":0,"dataset":""}),
                "epochs",
            ),
            (
                json!({"model_name":"mlp","num_layers":1,"nodes_per_layer":1,"epochs":1,"dataset":"", "bogus": 1}),
                "bogus",
            ),
            (
                json!({"model_name":"mlp","num_layers":1,"nodes_per_layer":1,"epochs":1,"dataset":"", "extra": {"k": 3}}),
                "extra.k",
            ),
        ];
        for (value, field) in cases {
            let err = Hyperparameters::from_json_map(value.as_object().unwrap(), &[]).unwrap_err();
            assert_eq!(err.field, field, "{value}");
        }
    }

    #[test]
    fn marker_from_json() {
        let v = json!({"run_id":"r1","label":"epoch_start","epoch":2,"ts_unix_ms":5000});
        let m = Marker::from_json_map(v.as_object().unwrap(), None, 0, &[]).unwrap();
        assert_eq!(m, marker("r1", 5000, MarkerLabel::EpochStart, Some(2)));
        let v = json!({"label":"phase"});
        let m = Marker::from_json_map(v.as_object().unwrap(), Some("r2"), 77, &[]).unwrap();
        assert_eq!(m.ts_unix_ms, 77);
        assert_eq!(m.run_id, "r2");
        let v = json!({"run_id":"r1","label":"epoch_end"});
        let err = Marker::from_json_map(v.as_object().unwrap(), None, 0, &[]).unwrap_err();
        assert_eq!(err.field, "epoch");
        let v = json!({"run_id":"r1","label":"lunch"});
        let err = Marker::from_json_map(v.as_object().unwrap(), None, 0, &[]).unwrap_err();
        assert_eq!(err.field, "label");
    }
}
