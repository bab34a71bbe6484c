//! Step-level metrics as JSONL.

use crate::error::Result;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// One training/eval step record. Keys inside `metrics` are sorted, so a
/// record serializes identically across runs; `wall_ms` is the only
/// non-deterministic field.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub phase: &'static str,
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Append-only JSONL metrics sink.
pub struct MetricsWriter {
    out: Option<std::io::BufWriter<std::fs::File>>,
    started: Instant,
}

impl MetricsWriter {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
            started: Instant::now(),
        })
    }

    /// Sink that drops records (for library callers without a run dir).
    pub fn disabled() -> Self {
        MetricsWriter {
            out: None,
            started: Instant::now(),
        }
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    pub fn log(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_serialize_with_stable_key_order() {
        let mut m = BTreeMap::new();
        m.insert("b_loss".to_string(), 1.0);
        m.insert("a_loss".to_string(), 2.0);
        let r = MetricRecord {
            phase: "stage1",
            stage: 1,
            epoch: 0,
            step: 3,
            metrics: m,
            wall_ms: 12,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.find("a_loss").unwrap() < s.find("b_loss").unwrap());
    }
}
