//! Append-only per-run sample storage.
//!
//! Samples live in `runs/<run_id>/samples.ndjson`, one JSON object per line.
//! A run has at most one writer; readers only ever consume complete lines, so
//! they never observe a half-written record. When a writer opens a file whose
//! last line is torn (a crash mid-write), the fragment is truncated away.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{self, DataDir};
use crate::sampler::{MemorySnapshot, ProcessSnapshot, Reading};

/// Exact CSV header written by [`Store::export_csv`].
pub const CSV_HEADER: [&str; 11] = [
    "ts_unix_ms",
    "total_bytes",
    "available_bytes",
    "used_bytes",
    "used_percent",
    "active_bytes",
    "free_bytes",
    "swap_total_bytes",
    "swap_used_bytes",
    "rss_bytes",
    "vms_bytes",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("timestamp {ts} is not after the last stored timestamp {last}")]
    NonMonotonicTimestamp { ts: i64, last: i64 },
    #[error("storage full")]
    StorageFull,
    #[error("invalid range: from {from} > to {to}")]
    InvalidRange { from: i64, to: i64 },
    #[error("empty input")]
    EmptyInput,
    #[error("bucket count must be at least 1")]
    InvalidBucketCount,
    #[error("record belongs to run {found}, not {expected}")]
    RunIdMismatch { expected: String, found: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("destination run {0} already has samples")]
    RunNotEmpty(String),
    #[error("CSV schema mismatch at line {line}: {reason}")]
    SchemaMismatch { line: u64, reason: String },
    #[error("corrupt sample line {line} in run {run_id}")]
    Corrupt { run_id: String, line: usize },
    #[error("store i/o: {0}")]
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

/// The persisted unit: one system snapshot plus the optional monitored
/// process snapshot, tagged with its run.
///
/// Serializes to the flat sample line format shared by the store, the HTTP
/// API, and the live stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SampleLine", try_from = "SampleLine")]
pub struct SampleRecord {
    pub run_id: String,
    pub system: MemorySnapshot,
    pub process: Option<ProcessSnapshot>,
}

impl SampleRecord {
    pub fn new(run_id: impl Into<String>, reading: Reading) -> Self {
        Self {
            run_id: run_id.into(),
            system: reading.system,
            process: reading.process,
        }
    }

    pub fn ts_unix_ms(&self) -> i64 {
        self.system.ts_unix_ms
    }

    pub fn used_bytes(&self) -> u64 {
        self.system.used_bytes
    }

    pub fn validate(&self) -> Result<(), String> {
        self.system.check_invariants()?;
        if let Some(p) = &self.process {
            if p.pid == 0 {
                return Err("pid must be positive".into());
            }
            if p.rss_bytes > p.vms_bytes {
                return Err(format!("rss {} > vms {}", p.rss_bytes, p.vms_bytes));
            }
            if p.ts_unix_ms != self.system.ts_unix_ms {
                return Err("process timestamp differs from system timestamp".into());
            }
        }
        Ok(())
    }
}

/// Flat wire/disk representation of a sample.
///
/// `run_id` is nullable only on the live stream, where a frame may not
/// belong to any run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub run_id: Option<String>,
    pub ts_unix_ms: i64,
    pub total_bytes: u64,
    pub available_bytes: u64,
    pub used_bytes: u64,
    pub used_percent: f64,
    pub active_bytes: u64,
    pub free_bytes: u64,
    pub swap_total_bytes: u64,
    pub swap_used_bytes: u64,
    pub pid: Option<u32>,
    pub rss_bytes: Option<u64>,
    pub vms_bytes: Option<u64>,
}

impl SampleLine {
    pub fn from_parts(run_id: Option<String>, system: &MemorySnapshot, process: Option<&ProcessSnapshot>) -> Self {
        Self {
            run_id,
            ts_unix_ms: system.ts_unix_ms,
            total_bytes: system.total_bytes,
            available_bytes: system.available_bytes,
            used_bytes: system.used_bytes,
            used_percent: system.used_percent,
            active_bytes: system.active_bytes,
            free_bytes: system.free_bytes,
            swap_total_bytes: system.swap_total_bytes,
            swap_used_bytes: system.swap_used_bytes,
            pid: process.map(|p| p.pid),
            rss_bytes: process.map(|p| p.rss_bytes),
            vms_bytes: process.map(|p| p.vms_bytes),
        }
    }
}

impl From<SampleRecord> for SampleLine {
    fn from(r: SampleRecord) -> Self {
        SampleLine::from_parts(Some(r.run_id), &r.system, r.process.as_ref())
    }
}

impl TryFrom<SampleLine> for SampleRecord {
    type Error = String;

    fn try_from(l: SampleLine) -> Result<Self, Self::Error> {
        let run_id = l.run_id.ok_or("run_id is null")?;
        let process = match (l.pid, l.rss_bytes, l.vms_bytes) {
            (Some(pid), Some(rss_bytes), Some(vms_bytes)) => Some(ProcessSnapshot {
                ts_unix_ms: l.ts_unix_ms,
                pid,
                rss_bytes,
                vms_bytes,
            }),
            (None, None, None) => None,
            _ => return Err("pid, rss_bytes and vms_bytes must be all present or all null".into()),
        };
        Ok(SampleRecord {
            run_id,
            system: MemorySnapshot {
                ts_unix_ms: l.ts_unix_ms,
                total_bytes: l.total_bytes,
                available_bytes: l.available_bytes,
                used_bytes: l.used_bytes,
                used_percent: l.used_percent,
                active_bytes: l.active_bytes,
                free_bytes: l.free_bytes,
                swap_total_bytes: l.swap_total_bytes,
                swap_used_bytes: l.swap_used_bytes,
            },
            process,
        })
    }
}

/// Aggregate of `used_bytes` over one downsampling interval `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start_ms: i64,
    pub end_ms: i64,
    pub count: u64,
    pub mean_used_bytes: f64,
    pub max_used_bytes: u64,
    pub min_used_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// `fdatasync` after every append.
    pub sync_each_append: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { sync_each_append: true }
    }
}

#[derive(Debug)]
struct RunWriter {
    file: File,
    last_ts: Option<i64>,
}

/// Sample storage rooted at a data directory.
#[derive(Debug)]
pub struct Store {
    dir: DataDir,
    options: StoreOptions,
    writers: Mutex<HashMap<String, Arc<Mutex<RunWriter>>>>,
}

impl Store {
    pub fn open(dir: DataDir) -> Result<Self, StoreError> {
        Self::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: DataDir, options: StoreOptions) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.runs_dir())?;
        Ok(Self {
            dir,
            options,
            writers: Mutex::new(HashMap::new()),
        })
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.dir
    }

    /// Appends one record. The record is flushed (and by default synced)
    /// before this returns.
    pub fn append(&self, run_id: &str, record: &SampleRecord) -> Result<(), StoreError> {
        if record.run_id != run_id {
            return Err(StoreError::RunIdMismatch {
                expected: run_id.to_owned(),
                found: record.run_id.clone(),
            });
        }
        record.validate().map_err(StoreError::InvalidRecord)?;
        let writer = self.writer(run_id)?;
        let mut w = writer.lock().unwrap();
        self.append_locked(run_id, &mut w, std::slice::from_ref(record))
    }

    fn append_locked(&self, run_id: &str, w: &mut RunWriter, records: &[SampleRecord]) -> Result<(), StoreError> {
        let mut last = w.last_ts;
        let mut buf = Vec::with_capacity(records.len() * 320);
        for record in records {
            let ts = record.ts_unix_ms();
            if let Some(prev) = last {
                if ts <= prev {
                    return Err(StoreError::NonMonotonicTimestamp { ts, last: prev });
                }
            }
            last = Some(ts);
            serde_json::to_writer(&mut buf, record).expect("sample serializes");
            buf.push(b'\n');
        }
        let res = w.file.write_all(&buf).and_then(|()| {
            if self.options.sync_each_append {
                w.file.sync_data()
            } else {
                Ok(())
            }
        });
        if let Err(e) = res {
            // A partial write leaves a torn tail; reopening truncates it.
            self.writers.lock().unwrap().remove(run_id);
            return Err(e.into());
        }
        w.last_ts = last;
        Ok(())
    }

    fn writer(&self, run_id: &str) -> Result<Arc<Mutex<RunWriter>>, StoreError> {
        let mut writers = self.writers.lock().unwrap();
        if let Some(w) = writers.get(run_id) {
            return Ok(Arc::clone(w));
        }
        if !self.dir.run_exists(run_id) {
            return Err(StoreError::UnknownRun(run_id.to_owned()));
        }
        let path = self.dir.samples_path(run_id).expect("run exists");
        let writer = Arc::new(Mutex::new(open_writer(run_id, &path)?));
        writers.insert(run_id.to_owned(), Arc::clone(&writer));
        Ok(writer)
    }

    /// Drops cached writers so the next append reopens files from disk.
    pub fn close(&self) {
        self.writers.lock().unwrap().clear();
    }

    /// Every stored sample of a run, in timestamp order.
    pub fn read_all(&self, run_id: &str) -> Result<Vec<SampleRecord>, StoreError> {
        self.scan(run_id, |_| true)
    }

    /// Samples with `from_ms <= ts < to_ms`, in timestamp order.
    pub fn query_range(&self, run_id: &str, from_ms: i64, to_ms: i64) -> Result<Vec<SampleRecord>, StoreError> {
        if from_ms > to_ms {
            return Err(StoreError::InvalidRange {
                from: from_ms,
                to: to_ms,
            });
        }
        self.scan(run_id, |ts| from_ms <= ts && ts < to_ms)
    }

    pub fn sample_count(&self, run_id: &str) -> Result<usize, StoreError> {
        Ok(self.read_all(run_id)?.len())
    }

    fn scan(&self, run_id: &str, keep: impl Fn(i64) -> bool) -> Result<Vec<SampleRecord>, StoreError> {
        if !self.dir.run_exists(run_id) {
            return Err(StoreError::UnknownRun(run_id.to_owned()));
        }
        let path = self.dir.samples_path(run_id).expect("run exists");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (line, text) in layout::complete_lines(&bytes) {
            let record: SampleRecord = serde_json::from_slice(text).map_err(|_| StoreError::Corrupt {
                run_id: run_id.to_owned(),
                line,
            })?;
            if keep(record.ts_unix_ms()) {
                out.push(record);
            }
        }
        Ok(out)
    }

    /// Writes the run's samples as CSV; returns the number of data rows.
    pub fn export_csv<W: Write>(&self, run_id: &str, destination: W) -> Result<usize, StoreError> {
        let samples = self.read_all(run_id)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(destination);
        w.write_record(CSV_HEADER).map_err(csv_io)?;
        for s in &samples {
            let sys = &s.system;
            let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                sys.ts_unix_ms.to_string(),
                sys.total_bytes.to_string(),
                sys.available_bytes.to_string(),
                sys.used_bytes.to_string(),
                sys.used_percent.to_string(),
                sys.active_bytes.to_string(),
                sys.free_bytes.to_string(),
                sys.swap_total_bytes.to_string(),
                sys.swap_used_bytes.to_string(),
                opt(s.process.map(|p| p.rss_bytes)),
                opt(s.process.map(|p| p.vms_bytes)),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(samples.len())
    }

    pub fn export_csv_to_path(&self, run_id: &str, path: &Path) -> Result<usize, StoreError> {
        if !self.dir.run_exists(run_id) {
            return Err(StoreError::UnknownRun(run_id.to_owned()));
        }
        let file = File::create(path)?;
        let rows = self.export_csv(run_id, io::BufWriter::new(&file))?;
        file.sync_all()?;
        Ok(rows)
    }

    /// Loads CSV rows into an empty run. The CSV carries no pid column, so
    /// process columns are attributed to `pid`; rows with process values are
    /// rejected when `pid` is `None`. The whole file is validated before
    /// anything is written.
    pub fn import_csv<R: Read>(&self, run_id: &str, source: R, pid: Option<u32>) -> Result<usize, StoreError> {
        let writer = self.writer(run_id)?;
        let mut w = writer.lock().unwrap();
        if w.last_ts.is_some() {
            return Err(StoreError::RunNotEmpty(run_id.to_owned()));
        }

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(source);
        let mut rows = reader.records();
        let header = rows
            .next()
            .ok_or(StoreError::SchemaMismatch {
                line: 1,
                reason: "missing header".into(),
            })?
            .map_err(|e| mismatch_from_csv(&e, 1))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(StoreError::SchemaMismatch {
                line: 1,
                reason: format!("expected header {}", CSV_HEADER.join(",")),
            });
        }

        let mut records = Vec::new();
        let mut last: Option<i64> = None;
        for row in rows {
            let row = row.map_err(|e| mismatch_from_csv(&e, 0))?;
            let line = row.position().map_or(0, |p| p.line());
            let record =
                parse_csv_row(run_id, &row, pid).map_err(|reason| StoreError::SchemaMismatch { line, reason })?;
            let ts = record.ts_unix_ms();
            if let Some(prev) = last {
                if ts <= prev {
                    return Err(StoreError::NonMonotonicTimestamp { ts, last: prev });
                }
            }
            last = Some(ts);
            records.push(record);
        }
        self.append_locked(run_id, &mut w, &records)?;
        Ok(records.len())
    }
}

fn open_writer(run_id: &str, path: &Path) -> Result<RunWriter, StoreError> {
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        tracing::warn!(
            run_id,
            dropped = bytes.len() - complete,
            "truncating torn trailing sample line"
        );
        file.set_len(complete as u64)?;
        file.seek(SeekFrom::End(0))?;
        file.sync_data()?;
    }
    let mut last_ts = None;
    if let Some((line, text)) = layout::complete_lines(&bytes[..complete]).last() {
        let record: SampleRecord = serde_json::from_slice(text).map_err(|_| StoreError::Corrupt {
            run_id: run_id.to_owned(),
            line,
        })?;
        last_ts = Some(record.ts_unix_ms());
    }
    Ok(RunWriter { file, last_ts })
}

fn csv_io(e: csv::Error) -> StoreError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => StoreError::Io(io::Error::other(format!("{other:?}"))),
    }
}

fn mismatch_from_csv(e: &csv::Error, fallback_line: u64) -> StoreError {
    StoreError::SchemaMismatch {
        line: e.position().map_or(fallback_line, |p| p.line()),
        reason: e.to_string(),
    }
}

fn parse_csv_row(run_id: &str, row: &csv::StringRecord, pid: Option<u32>) -> Result<SampleRecord, String> {
    if row.len() != CSV_HEADER.len() {
        return Err(format!("expected {} columns, found {}", CSV_HEADER.len(), row.len()));
    }
    let int = |i: usize| -> Result<u64, String> {
        row[i]
            .parse::<u64>()
            .map_err(|_| format!("{}: not an unsigned integer: {:?}", CSV_HEADER[i], &row[i]))
    };
    let opt = |i: usize| -> Result<Option<u64>, String> {
        if row[i].is_empty() {
            Ok(None)
        } else {
            int(i).map(Some)
        }
    };
    let ts: i64 = row[0]
        .parse()
        .map_err(|_| format!("ts_unix_ms: not an integer: {:?}", &row[0]))?;
    let used_percent: f64 = row[4]
        .parse()
        .map_err(|_| format!("used_percent: not a number: {:?}", &row[4]))?;
    let system = MemorySnapshot {
        ts_unix_ms: ts,
        total_bytes: int(1)?,
        available_bytes: int(2)?,
        used_bytes: int(3)?,
        used_percent,
        active_bytes: int(5)?,
        free_bytes: int(6)?,
        swap_total_bytes: int(7)?,
        swap_used_bytes: int(8)?,
    };
    let process = match (opt(9)?, opt(10)?) {
        (None, None) => None,
        (Some(rss_bytes), Some(vms_bytes)) => {
            let pid = pid.ok_or("process columns present but the destination run has no target pid")?;
            Some(ProcessSnapshot {
                ts_unix_ms: ts,
                pid,
                rss_bytes,
                vms_bytes,
            })
        }
        _ => return Err("rss_bytes and vms_bytes must both be present or both empty".into()),
    };
    let record = SampleRecord {
        run_id: run_id.to_owned(),
        system,
        process,
    };
    record.validate()?;
    Ok(record)
}

/// Splits `[first_ts, last_ts + 1)` into `n_buckets` equal-width,
/// left-closed right-open intervals and aggregates `used_bytes` in each.
///
/// Record `t` lands in bucket `floor((t - first) * n / span)`. Bucket `i`
/// reports the integer millisecond range it covers,
/// `[first + ceil(i * span / n), first + ceil((i + 1) * span / n))`.
/// Empty buckets are omitted.
pub fn downsample(records: &[SampleRecord], n_buckets: usize) -> Result<Vec<Bucket>, StoreError> {
    if n_buckets == 0 {
        return Err(StoreError::InvalidBucketCount);
    }
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f.ts_unix_ms(), l.ts_unix_ms()),
        _ => return Err(StoreError::EmptyInput),
    };
    let span = i128::from(last) - i128::from(first) + 1;
    if span <= 0 {
        return Err(StoreError::NonMonotonicTimestamp { ts: last, last: first });
    }
    let n = n_buckets as i128;
    let bound = |i: i128| -> i64 {
        let off = (i * span + n - 1).div_euclid(n);
        (i128::from(first) + off) as i64
    };

    let mut out: Vec<Bucket> = Vec::new();
    let mut current: Option<i128> = None;
    let mut prev_ts = first;
    for r in records {
        let ts = r.ts_unix_ms();
        if ts < prev_ts {
            return Err(StoreError::NonMonotonicTimestamp { ts, last: prev_ts });
        }
        prev_ts = ts;
        let index = (i128::from(ts) - i128::from(first)) * n / span;
        let used = r.used_bytes();
        match out.last_mut() {
            Some(b) if current == Some(index) => {
                b.count += 1;
                b.max_used_bytes = b.max_used_bytes.max(used);
                b.min_used_bytes = b.min_used_bytes.min(used);
            }
            _ => {
                current = Some(index);
                out.push(Bucket {
                    start_ms: bound(index),
                    end_ms: bound(index + 1),
                    count: 1,
                    mean_used_bytes: 0.0,
                    max_used_bytes: used,
                    min_used_bytes: used,
                });
            }
        }
    }

    // Means from exact 128-bit sums, one pass over the buckets' records.
    let mut rest = records;
    for b in &mut out {
        let (chunk, tail) = rest.split_at(b.count as usize);
        let sum: u128 = chunk.iter().map(|r| u128::from(r.used_bytes())).sum();
        b.mean_used_bytes = mean(sum, b.count);
        rest = tail;
    }
    Ok(out)
}

/// `sum / count` with the sum accumulated in 128 bits.
pub fn mean(sum: u128, count: u64) -> f64 {
    sum as f64 / count as f64
}
