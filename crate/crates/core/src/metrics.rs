//! Per-epoch metrics records, written as one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_SCHEMA: u32 = 1;

/// One line of the metrics file. Fields are only ever added, never renamed
/// or removed, and `schema` is bumped when they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: u32,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Absent in deterministic runs.
    pub wall_s: Option<f64>,
    pub staleness_max: Option<u64>,
    pub staleness_mean: Option<f64>,
    /// Absent in deterministic runs.
    pub bytes_moved: Option<u64>,
    /// PS timestamp at the snapshot.
    pub applied: u64,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write(&mut self, r: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let r = EpochRecord {
            schema: METRICS_SCHEMA,
            epoch: 3,
            loss: 0.25,
            accuracy: Some(0.9),
            wall_s: None,
            staleness_max: Some(2),
            staleness_mean: Some(0.5),
            bytes_moved: None,
            applied: 120,
        };
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&r).unwrap();
        w.write(&EpochRecord { epoch: 4, ..r.clone() }).unwrap();
        w.flush().unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.starts_with("{\"schema\":1,\"epoch\":3,"));
        assert!(line.contains("\"wall_s\":null"));
    }
}
