use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-epoch training record. Column names are those of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    pub val_loss: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s";

/// Appends one CSV row per epoch, flushing after each so a crashed run
/// leaves a readable prefix.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(CSV_HEADER.split(','))?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Final JSON summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_val_accuracy: f64,
    /// 1-based epoch at which `best_val_accuracy` was first reached.
    pub best_epoch: usize,
    pub final_metrics: Option<MetricsRecord>,
    pub history: Vec<MetricsRecord>,
}

impl TrainSummary {
    pub fn from_history(history: &[MetricsRecord]) -> Self {
        let mut best = (f64::NEG_INFINITY, 0);
        for r in history {
            if r.val_accuracy > best.0 {
                best = (r.val_accuracy, r.epoch);
            }
        }
        TrainSummary {
            epochs: history.len(),
            best_val_accuracy: if history.is_empty() { 0.0 } else { best.0 },
            best_epoch: best.1,
            final_metrics: history.last().cloned(),
            history: history.to_vec(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
