//! Per-run summaries, per-epoch breakdowns, and run-vs-run comparison.
//!
//! Everything here is a pure function over stored samples and markers. All
//! statistics use the system-wide `used_bytes` series; process RSS is only
//! reported as a peak.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::{Marker, MarkerLabel, RunRecord};
use crate::store::{mean, SampleRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("no samples to analyze")]
    EmptyInput,
    #[error("epoch {epoch} has no matching {label} marker")]
    UnmatchedMarker { epoch: u32, label: MarkerLabel },
    #[error("epoch {epoch} ends at or before it starts")]
    InvalidEpochSpan { epoch: u32 },
    #[error("epochs {first} and {second} overlap")]
    OverlappingEpochs { first: u32, second: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub duration_ms: i64,
    pub sample_count: u64,
    pub baseline_used_bytes: u64,
    pub peak_used_bytes: u64,
    pub mean_used_bytes: f64,
    pub delta_peak_bytes: u64,
    pub peak_rss_bytes: Option<u64>,
    pub growth_slope_bytes_per_s: f64,
}

/// Aggregate of the samples inside one `[start_ms, end_ms)` epoch window.
/// Peak and mean are `None` when no sample fell inside the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: u32,
    pub start_ms: i64,
    pub end_ms: i64,
    pub peak_used_bytes: Option<u64>,
    pub mean_used_bytes: Option<f64>,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    /// Only fields whose values differ, as `field -> [a, b]`.
    pub hyperparameter_diffs: BTreeMap<String, (Value, Value)>,
    pub peak_delta_bytes: i64,
    pub mean_delta_bytes: f64,
    pub slope_delta: f64,
}

pub fn run_summary(samples: &[SampleRecord]) -> Result<RunSummary, AnalysisError> {
    let first = samples.first().ok_or(AnalysisError::EmptyInput)?;
    let last = samples.last().expect("nonempty");
    let baseline = first.used_bytes();
    let peak = samples.iter().map(SampleRecord::used_bytes).max().expect("nonempty");
    let sum: u128 = samples.iter().map(|s| u128::from(s.used_bytes())).sum();
    let peak_rss = samples.iter().filter_map(|s| s.process.map(|p| p.rss_bytes)).max();
    Ok(RunSummary {
        run_id: first.run_id.clone(),
        duration_ms: last.ts_unix_ms() - first.ts_unix_ms(),
        sample_count: samples.len() as u64,
        baseline_used_bytes: baseline,
        peak_used_bytes: peak,
        mean_used_bytes: mean(sum, samples.len() as u64),
        delta_peak_bytes: peak - baseline,
        peak_rss_bytes: peak_rss,
        growth_slope_bytes_per_s: growth_slope(samples),
    })
}

/// Least-squares slope of `used_bytes` against time in seconds.
///
/// Both axes are offset by the first sample before accumulating, which keeps
/// the result exactly invariant under timestamp shifts and exactly zero for a
/// constant series. Returns 0 for fewer than two distinct timestamps.
pub fn growth_slope(samples: &[SampleRecord]) -> f64 {
    let Some(first) = samples.first() else {
        return 0.0;
    };
    let t0 = first.ts_unix_ms();
    let y0 = i128::from(first.used_bytes());
    let points: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            (
                (s.ts_unix_ms() - t0) as f64 / 1000.0,
                (i128::from(s.used_bytes()) - y0) as f64,
            )
        })
        .collect();
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in &points {
        let dt = t - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    if sxx == 0.0 || sxy == 0.0 {
        return 0.0;
    }
    sxy / sxx
}

/// Pairs `epoch_start`/`epoch_end` markers per epoch number and aggregates
/// the samples in each `[start, end)` window. A sample exactly on an epoch's
/// end boundary belongs to the following epoch. `phase` markers are ignored.
pub fn epoch_breakdown(samples: &[SampleRecord], markers: &[Marker]) -> Result<Vec<EpochStat>, AnalysisError> {
    let mut by_epoch: BTreeMap<u32, Vec<&Marker>> = BTreeMap::new();
    for m in markers {
        if matches!(m.label, MarkerLabel::EpochStart | MarkerLabel::EpochEnd) {
            // Validated markers always carry an epoch for these labels.
            if let Some(e) = m.epoch {
                by_epoch.entry(e).or_default().push(m);
            }
        }
    }
    if by_epoch.is_empty() {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }

    let mut spans: Vec<(u32, i64, i64)> = Vec::new();
    for (epoch, mut ms) in by_epoch {
        // Starts sort before ends at equal timestamps.
        ms.sort_by_key(|m| (m.ts_unix_ms, m.label));
        let mut open: Option<i64> = None;
        for m in ms {
            match (m.label, open) {
                (MarkerLabel::EpochStart, None) => open = Some(m.ts_unix_ms),
                (MarkerLabel::EpochStart, Some(_)) => {
                    return Err(AnalysisError::UnmatchedMarker {
                        epoch,
                        label: MarkerLabel::EpochEnd,
                    })
                }
                (MarkerLabel::EpochEnd, Some(start)) => {
                    if m.ts_unix_ms <= start {
                        return Err(AnalysisError::InvalidEpochSpan { epoch });
                    }
                    spans.push((epoch, start, m.ts_unix_ms));
                    open = None;
                }
                (MarkerLabel::EpochEnd, None) => {
                    return Err(AnalysisError::UnmatchedMarker {
                        epoch,
                        label: MarkerLabel::EpochStart,
                    })
                }
                (MarkerLabel::Phase, _) => {}
            }
        }
        if open.is_some() {
            return Err(AnalysisError::UnmatchedMarker {
                epoch,
                label: MarkerLabel::EpochEnd,
            });
        }
    }
    spans.sort_by_key(|&(epoch, start, _)| (start, epoch));
    for pair in spans.windows(2) {
        if pair[1].1 < pair[0].2 {
            return Err(AnalysisError::OverlappingEpochs {
                first: pair[0].0,
                second: pair[1].0,
            });
        }
    }

    Ok(spans
        .into_iter()
        .map(|(epoch, start, end)| {
            let lo = samples.partition_point(|s| s.ts_unix_ms() < start);
            let hi = samples.partition_point(|s| s.ts_unix_ms() < end);
            let window = &samples[lo..hi.max(lo)];
            let sum: u128 = window.iter().map(|s| u128::from(s.used_bytes())).sum();
            EpochStat {
                epoch,
                start_ms: start,
                end_ms: end,
                peak_used_bytes: window.iter().map(SampleRecord::used_bytes).max(),
                mean_used_bytes: (!window.is_empty()).then(|| mean(sum, window.len() as u64)),
                sample_count: window.len() as u64,
            }
        })
        .collect())
}

/// Compares two runs; every delta is `b - a`.
pub fn compare_runs(
    a: (&RunRecord, &[SampleRecord]),
    b: (&RunRecord, &[SampleRecord]),
) -> Result<CompareReport, AnalysisError> {
    let sa = run_summary(a.1)?;
    let sb = run_summary(b.1)?;
    let fa = a.0.hyperparameters.fields();
    let fb = b.0.hyperparameters.fields();
    let mut diffs = BTreeMap::new();
    for key in fa.keys().chain(fb.keys()) {
        let va = fa.get(key).cloned().unwrap_or(Value::Null);
        let vb = fb.get(key).cloned().unwrap_or(Value::Null);
        if va != vb {
            diffs.insert(key.clone(), (va, vb));
        }
    }
    Ok(CompareReport {
        run_a: a.0.run_id.clone(),
        run_b: b.0.run_id.clone(),
        hyperparameter_diffs: diffs,
        peak_delta_bytes: (i128::from(sb.peak_used_bytes) - i128::from(sa.peak_used_bytes)) as i64,
        mean_delta_bytes: sb.mean_used_bytes - sa.mean_used_bytes,
        slope_delta: sb.growth_slope_bytes_per_s - sa.growth_slope_bytes_per_s,
    })
}
