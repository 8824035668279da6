//! Brute-force reference implementations the library is checked against.

use memscope_core::store::{Bucket, SampleRecord};

/// Buckets by testing every record against every bucket's bounds.
pub fn buckets(records: &[SampleRecord], n: usize) -> Vec<Bucket> {
    let first = records[0].ts_unix_ms() as i128;
    let span = records.last().unwrap().ts_unix_ms() as i128 - first + 1;
    let n = n as i128;
    let ceil_div = |a: i128, b: i128| a / b + i128::from(a % b != 0);
    (0..n)
        .filter_map(|i| {
            let members: Vec<u64> = records
                .iter()
                .filter(|r| {
                    let off = (r.ts_unix_ms() as i128 - first) * n;
                    off >= i * span && off < (i + 1) * span
                })
                .map(|r| r.used_bytes())
                .collect();
            if members.is_empty() {
                return None;
            }
            let sum: u128 = members.iter().map(|&u| u as u128).sum();
            Some(Bucket {
                start_ms: (first + ceil_div(i * span, n)) as i64,
                end_ms: (first + ceil_div((i + 1) * span, n)) as i64,
                count: members.len() as u64,
                mean_used_bytes: sum as f64 / members.len() as f64,
                max_used_bytes: *members.iter().max().unwrap(),
                min_used_bytes: *members.iter().min().unwrap(),
            })
        })
        .collect()
}

/// Records with `from <= ts < to`.
pub fn range(records: &[SampleRecord], from: i64, to: i64) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| from <= r.ts_unix_ms() && r.ts_unix_ms() < to)
        .cloned()
        .collect()
}

/// Exact least-squares slope in bytes per second from integer sums.
pub fn slope(samples: &[SampleRecord]) -> f64 {
    let n = samples.len() as i128;
    let (mut st, mut sy, mut stt, mut sty) = (0i128, 0i128, 0i128, 0i128);
    for s in samples {
        let t = s.ts_unix_ms() as i128;
        let y = s.used_bytes() as i128;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let den = n * stt - st * st;
    if den == 0 {
        return 0.0;
    }
    1000.0 * (n * sty - st * sy) as f64 / den as f64
}

pub fn mean_used(samples: &[SampleRecord]) -> f64 {
    samples.iter().map(|r| r.used_bytes() as u128).sum::<u128>() as f64 / samples.len() as f64
}

pub fn relative_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}
