//! One observation per record, written as JSON lines with a CSV mirror.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: String,
    pub arch: String,
    pub activation: String,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    pub gamma0: f64,
    pub beta: Option<f64>,
    pub step: usize,
    pub metric: String,
    /// `None` exactly when `diverged` is set.
    pub value: Option<f64>,
    pub diverged: bool,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialise")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| LabError::Data(format!("bad record `{line}`: {e}")))
    }

    /// Numeric value of a named field; metric names resolve to `value`.
    pub fn field(&self, name: &str) -> Option<f64> {
        match name {
            "seed" => Some(self.seed as f64),
            "width" => Some(self.width as f64),
            "depth" => Some(self.depth as f64),
            "gamma0" => Some(self.gamma0),
            "beta" => self.beta,
            "step" => Some(self.step as f64),
            "depth/width" => Some(self.depth as f64 / self.width as f64),
            "width/depth" => Some(self.width as f64 / self.depth as f64),
            "value" => self.value,
            _ => None,
        }
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(MetricRecord::from_json_line(&line)?);
        }
    }
    Ok(out)
}

pub fn to_jsonl(records: &[MetricRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    s
}

/// Appends each record to `<stem>.jsonl` and `<stem>.csv`, flushing per record.
pub struct RecordSink {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    pub jsonl_path: PathBuf,
    pub csv_path: PathBuf,
}

impl RecordSink {
    pub fn create(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let jsonl_path = stem.with_extension("jsonl");
        let csv_path = stem.with_extension("csv");
        let jsonl = BufWriter::new(File::create(&jsonl_path)?);
        let csv = csv::Writer::from_path(&csv_path)
            .map_err(|e| LabError::Io(format!("{}: {e}", csv_path.display())))?;
        Ok(Self {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.jsonl, "{}", r.to_json_line())?;
        self.jsonl.flush()?;
        self.csv.serialize(r).map_err(|e| LabError::Io(e.to_string()))?;
        self.csv.flush()?;
        Ok(())
    }
}
