//! Training metrics as newline-delimited JSON records.
//!
//! The first line of a metrics file is a header carrying the fully resolved
//! run configuration and seed; each following line is one training step.
//! Serialization is deterministic (fixed field order, shortest-roundtrip
//! float formatting), so identical runs produce byte-identical files.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training step's log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub rec_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// A full metrics log: resolved-config header plus per-step records.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: serde_json::Value,
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn new(header: serde_json::Value, records: Vec<StepRecord>) -> Self {
        MetricsLog { header, records }
    }

    /// Renders the log to its on-disk byte representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = serde_json::json!({ "type": "header", "config": self.header });
        out.extend_from_slice(header.to_string().as_bytes());
        out.push(b'\n');
        for r in &self.records {
            let mut line = serde_json::to_value(r).expect("step record serializes");
            line["type"] = "step".into();
            out.extend_from_slice(line.to_string().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<MetricsLog> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut header = None;
        let mut records = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    offset: line_no as u64,
                    reason: format!("bad JSON line: {e}"),
                })?;
            match value.get("type").and_then(|t| t.as_str()) {
                Some("header") => header = value.get("config").cloned(),
                Some("step") => {
                    let record: StepRecord =
                        serde_json::from_value(value).map_err(|e| Error::Format {
                            path: path.display().to_string(),
                            offset: line_no as u64,
                            reason: format!("bad step record: {e}"),
                        })?;
                    records.push(record);
                }
                other => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        offset: line_no as u64,
                        reason: format!("unknown record type {other:?}"),
                    })
                }
            }
        }
        Ok(MetricsLog {
            header: header.ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                offset: 0,
                reason: "missing header line".into(),
            })?,
            records,
        })
    }
}

/// FNV-1a over a byte stream; used to fingerprint logs and table outputs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
