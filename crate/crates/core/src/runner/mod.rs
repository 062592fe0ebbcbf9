//! Synthetic datasets, train/evaluate protocols, sweeps and report rendering.

pub mod experiment;
pub mod report;
pub mod synth;

use thiserror::Error;

use crate::metrics::MetricError;
use crate::store::StoreError;
use crate::trainer::TrainError;

pub use experiment::{run_cv, run_experiment, ExperimentSpec, TrainOverrides};
pub use report::{emit_report, CellFailure, Report, ReportFormat, ReportRow};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("experiment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
