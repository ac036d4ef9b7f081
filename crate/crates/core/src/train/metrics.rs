use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,total,cgra,selfcl_v,selfcl_a,grad_norm,wall_ms";

/// Per-epoch training summary. Losses are batch means of the unweighted
/// terms; a disabled term reads 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub cgra_loss: f64,
    pub selfcl_v: f64,
    pub selfcl_a: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.total_loss, self.cgra_loss, self.selfcl_v, self.selfcl_a, self.grad_norm, self.wall_ms
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Contract(format!("malformed metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            total_loss: num(1)?,
            cgra_loss: num(2)?,
            selfcl_v: num(3)?,
            selfcl_a: num(4)?,
            grad_norm: num(5)?,
            wall_ms: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Streams rows to a hidden sibling file, one complete line per epoch, and
/// renames it into place on [`MetricsWriter::finish`]. Dropping an
/// unfinished writer deletes the partial file.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    partial: PathBuf,
    file: Option<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let partial = path.with_file_name(format!(".{name}.partial"));
        let mut file = File::create(&partial).map_err(|e| Error::io(format!("creating {}", partial.display()), e))?;
        file.write_all(format!("{METRICS_HEADER}\n").as_bytes())
            .map_err(|e| Error::io(format!("writing {}", partial.display()), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            partial,
            file: Some(file),
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let file = self.file.as_mut().ok_or_else(|| Error::Contract("metrics writer already finished".into()))?;
        let line = format!("{}\n", rec.csv_row());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(format!("appending to {}", self.partial.display()), e))
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(file) = self.file.take() {
            file.sync_all().map_err(|e| Error::io(format!("syncing {}", self.partial.display()), e))?;
        }
        fs::rename(&self.partial, &self.path).map_err(|e| Error::io(format!("renaming into {}", self.path.display()), e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        if self.file.is_some() {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            epoch,
            total_loss: 1.0 / 3.0,
            cgra_loss: 0.25,
            selfcl_v: 2.0,
            selfcl_a: 2.5,
            grad_norm: 0.1,
            wall_ms: 0,
        }
    }

    #[test]
    fn rows_round_trip_exactly() {
        let r = rec(4);
        assert_eq!(MetricsRecord::parse_row(&r.csv_row()).unwrap(), r);
        assert!(MetricsRecord::parse_row("1,2").is_err());
    }

    #[test]
    fn finished_writer_produces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&rec(1)).unwrap();
        w.append(&rec(2)).unwrap();
        w.finish().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn abandoned_writer_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        {
            let mut w = MetricsWriter::create(&path).unwrap();
            w.append(&rec(1)).unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
