//! Error taxonomy mapped onto process exit codes.
//!
//! Exit 1 is argument parsing, which clap reports before any command runs.
//! Everything after that is either a problem with what the user handed us
//! (exit 2) or a failure while executing an otherwise sound run (exit 3).

use flowsentry::bench::BenchError;
use flowsentry::dataset::DatasetError;
use flowsentry::metrics::MetricsError;
use flowsentry::model::ModelError;
use flowsentry::preprocess::PreprocessError;
use flowsentry::training::TrainingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Configs, specs, datasets, or checkpoints that do not parse or do not
    /// satisfy their invariants.
    #[error("{0}")]
    Data(String),

    /// A sound run that failed while executing: training blew up, a file
    /// could not be written, a timed section was busy.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// An IO failure while writing an artifact; always a runtime error.
    pub fn write(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Runtime(format!("could not write {}: {source}", path.display()))
    }

    /// An IO failure while reading something the user pointed us at.
    pub fn read(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Data(format!("could not read {}: {source}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        // Metric tallies only fail on internal length mismatches.
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            // The graph hit trouble mid-flight.
            ModelError::Autograd(_) => CliError::Runtime(e.to_string()),
            // Filesystem trouble around a checkpoint.
            ModelError::CheckpointIo(_) => CliError::Runtime(e.to_string()),
            // Everything else is a malformed config, batch, or checkpoint.
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::BadConfig { .. } | BenchError::InsufficientData { .. } => {
                CliError::Data(e.to_string())
            }
            BenchError::Model(m) => m.into(),
            BenchError::TimedSectionBusy | BenchError::EmptyTimings | BenchError::Autograd(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::BadConfig { .. }
            | TrainingError::EmptySplit { .. }
            | TrainingError::AllCellsInvalid => CliError::Data(e.to_string()),
            TrainingError::Model(m) => m.into(),
            TrainingError::Bench(b) => b.into(),
            TrainingError::NonFiniteLoss { .. }
            | TrainingError::Autograd(_)
            | TrainingError::Metrics(_) => CliError::Runtime(e.to_string()),
        }
    }
}
