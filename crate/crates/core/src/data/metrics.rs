//! Per-epoch metrics CSV.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NodeKind;

pub const HEADER: [&str; 8] = [
    "epoch",
    "node_kind",
    "loss_task",
    "loss_temporal",
    "train_acc",
    "test_acc",
    "lr",
    "ms_per_batch",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub node_kind: NodeKind,
    pub loss_task: f32,
    /// Mean temporal loss; present on review epochs only.
    pub loss_temporal: Option<f32>,
    pub train_acc: f32,
    pub test_acc: f32,
    pub lr: f32,
    pub ms_per_batch: f32,
}

/// Appends one flushed row per call; the header is written on creation.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        inner.write_record(HEADER)?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    /// Reopen an existing file for appending (resumed runs).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Format(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}
