use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const METRICS_HEADER: [&str; 10] = [
    "update",
    "global_step",
    "env_steps",
    "mean_episode_return",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "eval_greedy_length",
    "wall_time_s",
];

/// One line of the training log; `eval_greedy_length` is empty on updates without evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub update: u64,
    pub global_step: u64,
    pub env_steps: u64,
    pub mean_episode_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub eval_greedy_length: Option<f64>,
    pub wall_time_s: f64,
}

/// Append-only CSV writer that flushes after every row.
pub struct MetricLog {
    writer: csv::Writer<File>,
}

impl MetricLog {
    /// Creates (truncating) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(METRICS_HEADER).map_err(|e| HarnessError::io(path, e))?;
        writer.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(MetricLog { writer })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<(), HarnessError> {
        self.writer.serialize(row).map_err(|e| HarnessError::Format(e.to_string()))?;
        self.writer.flush().map_err(|e| HarnessError::Format(e.to_string()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| HarnessError::io(path, e))?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(HarnessError::Format(format!("{}: unexpected metric header {header:?}", path.display())));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| HarnessError::Format(format!("{}: {e}", path.display()))))
        .collect()
}
