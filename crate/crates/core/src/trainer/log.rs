//! Append-only JSON-lines metrics log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tracker state is embedded into the log every this many steps so the
/// confidence trajectory can be audited without replaying the run.
pub const CONF_SNAPSHOT_EVERY: u64 = 50;

/// One training step's metrics. `sampled_classes` holds, per batch slot, the
/// class that drove the draw (adaptive mode) or every class present in the
/// drawn image (uniform mode). `m_c` is the batch mean confidence per class
/// (`null` where the batch had no pixels of that class), which is exactly the
/// sequence needed to recompute the confidence EMA offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub l_seg_orig: f64,
    pub l_seg_aug: f64,
    pub l_ai: f64,
    pub l_tot: f64,
    pub lr_t: f64,
    pub valid_pixel_count: usize,
    pub sampled_classes: Vec<Vec<u32>>,
    pub m_c: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conf: Option<Vec<f64>>,
}

/// Appending writer; each record is one line, flushed as it is written.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn append_to(path: &Path) -> Result<MetricsLog> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { file })
    }

    pub fn push(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Training(format!("cannot serialize step record: {e}")))?;
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::Training(format!("cannot append to metrics log: {e}")))
    }
}

/// Read a whole metrics log back, in order.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Training(format!("metrics log line {}: {e}", k + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
