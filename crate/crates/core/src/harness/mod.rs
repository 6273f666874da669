//! Experiment runner behind the `raceprobe` CLI: sweeps, metric runs,
//! intervention searches, persistence and the optional external scorer.
//!
//! Each command writes line-delimited records under `<out>/records/` and
//! aggregate CSVs under `<out>/`. Aggregate CSVs use the long schema
//! `layer,metric,family,slice,split,value`; `layer` is empty for
//! layer-free metrics and `value` is empty where a metric is undefined.

mod config;
mod records;
mod run;
mod scorer;
pub mod stats;

pub use config::{
    parse_slice_key, AblationConfig, DataConfig, DistractorRange, ExperimentConfig, InterpretSettings, PatchingConfig,
    ScorerConfig, SCORER_URL_ENV,
};
pub use records::{
    accuracy_table, check_pairing, pair_tallies, question_id, read_records, write_records, AblatedRole,
    ExperimentRecord, Intervention, Manifest, ManifestEntry, PairTally, PatchCell, Payload,
};
pub use run::{
    AblationBlock, AblationSummary, AttnMassSummary, BehavioralSummary, GenDataSummary, Harness, InterpretSummary,
    KindSummary, LensSummary, PatchingSummary, TrainSummary,
};
pub use scorer::HttpScorer;

use thiserror::Error;

use crate::datasets::DataError;
use crate::interventions::InterventionError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training target unmet: {0}")]
    TargetUnmet(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for configuration and data problems, 3 for an unmet target, 1 for
    /// I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Data(_) => 2,
            Self::TargetUnmet(_) => 3,
            Self::Io(_) | Self::Json(_) | Self::Csv(_) => 1,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => Self::Io(e),
            DataError::Parameter(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MetricError> for HarnessError {
    fn from(e: MetricError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<InterventionError> for HarnessError {
    fn from(e: InterventionError) -> Self {
        match e {
            InterventionError::Plan(m) | InterventionError::Config(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::TargetUnmet {
                accuracy, target, steps, ..
            } => Self::TargetUnmet(format!(
                "0-distractor pair accuracy {accuracy:.3} below {target:.3} after {steps} steps"
            )),
            TrainError::Config(m) => Self::Config(m),
            TrainError::Io(e) => Self::Io(e),
            other => Self::Data(other.to_string()),
        }
    }
}
