//! JSONL metrics stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One optimizer step. `wall_time_ms` is the only field allowed to differ
/// between reruns of an identical configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    /// (texture id, mean loss per target location) pairs.
    pub per_texture_loss: Vec<(u32, f32)>,
    /// The optimized ω-weighted combined loss (sum semantics, Eq. 4).
    pub combined_loss: f32,
    pub mean_positive_logit: f32,
    pub mean_negative_logit: f32,
    pub wall_time_ms: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = self.combined_loss.is_finite()
            && self.mean_positive_logit.is_finite()
            && self.mean_negative_logit.is_finite()
            && self.per_texture_loss.iter().all(|(_, v)| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { op: "metrics" });
        }
        Ok(())
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug)]
pub enum MetricsWriter {
    File(BufWriter<File>),
    Stdout,
    /// Keep records in memory (tests, probe baselines).
    Buffer(Vec<MetricsRecord>),
    Sink,
}

impl MetricsWriter {
    pub fn file(path: &Path) -> Result<Self> {
        let f = File::create(path)
            .map_err(|e| Error::io(format!("creating metrics file {}", path.display()), e))?;
        Ok(MetricsWriter::File(BufWriter::new(f)))
    }

    pub fn buffer() -> Self {
        MetricsWriter::Buffer(Vec::new())
    }

    pub fn emit(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        let write_line = |w: &mut dyn Write| -> std::io::Result<()> {
            let line = serde_json::to_string(record).expect("record serializes");
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")
        };
        match self {
            MetricsWriter::File(w) => {
                write_line(w).map_err(|e| Error::io("writing metrics", e))?;
            }
            MetricsWriter::Stdout => {
                let stdout = std::io::stdout();
                write_line(&mut stdout.lock()).map_err(|e| Error::io("writing metrics", e))?;
            }
            MetricsWriter::Buffer(v) => v.push(record.clone()),
            MetricsWriter::Sink => {}
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        match self {
            MetricsWriter::Buffer(v) => v,
            _ => &[],
        }
    }

    pub fn finish(&mut self) -> Result<()> {
        if let MetricsWriter::File(w) = self {
            w.flush().map_err(|e| Error::io("flushing metrics", e))?;
        }
        Ok(())
    }
}
