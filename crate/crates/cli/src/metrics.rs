//! Append-only metrics CSV.

use std::fs::{self, OpenOptions};
use std::path::Path;

use anyhow::{Context, Result};

pub const HEADER: [&str; 8] = ["run_id", "variant", "beta", "seed", "epoch", "metric", "subset", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub beta: f64,
    pub seed: u64,
    pub epoch: usize,
    pub metric: String,
    pub subset: String,
    pub value: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 8] {
        [
            self.run_id.clone(),
            self.variant.clone(),
            self.beta.to_string(),
            self.seed.to_string(),
            self.epoch.to_string(),
            self.metric.clone(),
            self.subset.clone(),
            self.value.to_string(),
        ]
    }
}

/// Shared fields of a run's rows.
#[derive(Debug, Clone)]
pub struct RowContext {
    pub run_id: String,
    pub variant: String,
    pub beta: f64,
    pub seed: u64,
}

impl RowContext {
    pub fn row(&self, epoch: usize, metric: &str, subset: &str, value: f64) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.clone(),
            variant: self.variant.clone(),
            beta: self.beta,
            seed: self.seed,
            epoch,
            metric: metric.to_string(),
            subset: subset.to_string(),
            value,
        }
    }
}

/// Creates `path` with just the header row, replacing any existing file.
pub fn create(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(HEADER)?;
    w.flush()?;
    Ok(())
}

pub fn append(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    create(path)?;
    append(path, rows)
}

pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricsRow {
                run_id: rec[0].to_string(),
                variant: rec[1].to_string(),
                beta: rec[2].parse()?,
                seed: rec[3].parse()?,
                epoch: rec[4].parse()?,
                metric: rec[5].to_string(),
                subset: rec[6].to_string(),
                value: rec[7].parse()?,
            })
        })
        .collect()
}
