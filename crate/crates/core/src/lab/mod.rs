//! Experiment orchestration: configuration, checkpoint persistence,
//! the three-phase experiment driver, and CSV/SVG reporting.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{ConfigError, ExperimentConfig, TrainMethod};
pub use experiment::{run_experiment, ExperimentArtifacts};
pub use report::write_report;

use crate::analysis::AnalysisError;
use crate::es::EsError;
use crate::grpo::GrpoError;
use crate::params::ParamError;
use crate::policy::PolicyError;
use crate::tasks::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("pretraining reached {reached:.3} prior-task accuracy after {iterations} iterations, below the target {target}")]
    PretrainTargetMissed { target: f64, reached: f64, iterations: usize },
    #[error("{path} line {line}: {detail}")]
    MalformedCsv { path: std::path::PathBuf, line: usize, detail: String },
    #[error("ESFORGE_THREADS must be a positive integer, got `{value}`")]
    BadThreadEnv { value: String },
}

/// Attaches the offending path to an I/O error.
pub(crate) fn io_at(path: &std::path::Path, source: std::io::Error) -> LabError {
    LabError::Io { path: path.to_path_buf(), source }
}

/// Worker cap: `ESFORGE_THREADS` if set, otherwise the logical core count.
pub fn thread_cap() -> Result<usize, LabError> {
    match std::env::var("ESFORGE_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(LabError::BadThreadEnv { value: raw }),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(usize::from).unwrap_or(1)),
    }
}
