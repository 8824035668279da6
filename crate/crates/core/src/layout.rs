//! On-disk layout of a data directory.
//!
//! ```text
//! <data-dir>/
//!   runs/<run_id>/manifest         run record + format_version (JSON)
//!   runs/<run_id>/samples.ndjson   one sample per line
//!   runs/<run_id>/markers.ndjson   one marker per line
//!   dashboard/                     static dashboard assets
//! ```

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest";
pub const SAMPLES: &str = "samples.ndjson";
pub const MARKERS: &str = "markers.ndjson";

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn dashboard_dir(&self) -> PathBuf {
        self.root.join("dashboard")
    }

    /// Directory of `run_id`, or `None` if the id could escape `runs/`.
    pub fn run_dir(&self, run_id: &str) -> Option<PathBuf> {
        is_valid_run_id(run_id).then(|| self.runs_dir().join(run_id))
    }

    pub fn manifest_path(&self, run_id: &str) -> Option<PathBuf> {
        self.run_dir(run_id).map(|d| d.join(MANIFEST))
    }

    pub fn samples_path(&self, run_id: &str) -> Option<PathBuf> {
        self.run_dir(run_id).map(|d| d.join(SAMPLES))
    }

    pub fn markers_path(&self, run_id: &str) -> Option<PathBuf> {
        self.run_dir(run_id).map(|d| d.join(MARKERS))
    }

    /// True if the run directory holds a manifest.
    pub fn run_exists(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_some_and(|p| p.is_file())
    }
}

/// Run ids double as directory names: ASCII alphanumerics, `-` and `_` only.
pub fn is_valid_run_id(run_id: &str) -> bool {
    !run_id.is_empty()
        && run_id.len() <= 128
        && run_id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Replaces `path` with `contents` via a synced temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        if let Ok(dir) = File::open(parent) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}

/// Complete lines of `bytes`; a trailing fragment without `\n` is ignored.
pub fn complete_lines(bytes: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes[..end]
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l))
}
