//! Training and evaluation orchestration: configuration, checkpoints, metric logs and reports.

mod checkpoint;
mod config;
mod eval;
mod metrics;
mod report;
mod train;

use std::path::Path;

use thiserror::Error;

use crate::algo::AlgoError;
use crate::env::EnvError;
use crate::model::ModelError;
use crate::problems::ProblemError;
use crate::search::SearchError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Algorithm, ExperimentConfig, ENV_PREFIX};
pub use eval::{eval_instances, evaluate, greedy_mean_length, reference_lengths, EvalReport, Reference, StrategyReport};
pub use metrics::{read_metrics, MetricLog, MetricRow, METRICS_HEADER};
pub use report::{emit_report, learning_curve, time_to_threshold, CurvePoint, ReportFiles, ThresholdHit};
pub use train::{checkpoint_path, train, TrainOutcome, BEST_CHECKPOINT, CONFIG_COPY, METRICS_FILE};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged ({reason}); last good checkpoint: {}", last_checkpoint.display())]
    Diverged { reason: String, last_checkpoint: std::path::PathBuf },
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io(format!("{}: {e}", path.display()))
    }
}
