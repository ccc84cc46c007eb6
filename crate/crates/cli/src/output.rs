use std::fs::{self, File};
use std::path::{Path, PathBuf};

use feedcap::export::fmt_num;
use feedcap::Result;
use serde_json::Value;

/// Rate units; powers and variances are never rescaled.
#[derive(Debug, Clone, Copy)]
pub struct Units {
    pub bits: bool,
}

impl Units {
    pub fn rate(&self, nats: f64) -> f64 {
        if self.bits {
            nats / std::f64::consts::LN_2
        } else {
            nats
        }
    }

    pub fn name(&self) -> &'static str {
        if self.bits {
            "bits"
        } else {
            "nats"
        }
    }
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(self.path(name))?);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
        text.push('\n');
        fs::write(self.path("summary.json"), text)?;
        Ok(())
    }
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn nums(values: &[f64]) -> Vec<String> {
    values.iter().map(|&v| fmt_num(v)).collect()
}
