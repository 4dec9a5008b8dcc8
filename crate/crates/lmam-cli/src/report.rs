//! Run reports and CSV emission. Every command writes a `report.json` under
//! its `--out` directory echoing the effective configuration and seed, so
//! each reported number can be reproduced from the report alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

#[derive(Serialize)]
pub struct RunReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: Value,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub timings_ms: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub parameter_counts: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config: Value::Null,
            metrics: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            parameter_counts: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self, CliError> {
        self.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn metric<T: Serialize>(&mut self, name: &str, value: T) {
        if let Ok(v) = serde_json::to_value(value) {
            self.metrics.insert(name.to_string(), v);
        }
    }
}

/// Output directory with the fixed layout report.json, *.csv, checkpoints/.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        Ok(Self { root: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoints(&self) -> Result<PathBuf, CliError> {
        let dir = self.root.join("checkpoints");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn write_report(&self, report: &RunReport) -> Result<PathBuf, CliError> {
        let path = self.file("report.json");
        let text = serde_json::to_string_pretty(report)?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf, CliError> {
        let path = self.file(name);
        let mut file = fs::File::create(&path)?;
        writeln!(file, "{header}")?;
        for row in rows {
            writeln!(file, "{row}")?;
        }
        Ok(path)
    }
}

/// Median and interquartile range; input need not be sorted.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let q = |frac: f64| -> f64 {
        let pos = frac * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    };
    (q(0.5), q(0.75) - q(0.25))
}

#[cfg(test)]
mod tests {
    use super::median_iqr;

    #[test]
    fn median_and_iqr_of_known_samples() {
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);

        let (m, _) = median_iqr(&[2.0, 1.0]);
        assert_eq!(m, 1.5);
    }
}
