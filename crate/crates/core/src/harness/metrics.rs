//! Metrics CSV rows.
//!
//! Column set and order are fixed by [`METRICS_HEADER`]; floats are written
//! with six decimals so identical runs produce identical bytes.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "run_id,mode,manifold,sparsity,seed,epoch,split,condition_bucket,loss,accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub manifold: String,
    pub sparsity: f64,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    /// Bucket index as text, or `all`.
    pub condition_bucket: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.run_id,
            self.mode,
            self.manifold,
            self.sparsity,
            self.seed,
            self.epoch,
            self.split,
            self.condition_bucket,
            self.loss,
            self.accuracy
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() < 10 {
            return Err(Error::format(format!("metrics row has {} fields: '{line}'", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::format(format!("bad number '{}' in metrics row", f[i])))
        };
        Ok(Self {
            run_id: f[0].into(),
            mode: f[1].into(),
            manifold: f[2].into(),
            sparsity: num(3)?,
            seed: f[4].parse().map_err(|_| Error::format(format!("bad seed '{}'", f[4])))?,
            epoch: f[5].parse().map_err(|_| Error::format(format!("bad epoch '{}'", f[5])))?,
            split: f[6].into(),
            condition_bucket: f[7].into(),
            loss: num(8)?,
            accuracy: num(9)?,
        })
    }
}

/// Append-only CSV writer that flushes after every batch of rows.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Truncates `path` and writes the header.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(OpenOptions::new().append(true).open(path)?) })
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn write_rows(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for r in rows {
            self.write_line(&r.to_csv())?;
        }
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}
