//! Experiment harness for predictive-coding scaling studies.
//!
//! - [`data`]: toy task and dataset loaders
//! - [`config`]: flat key-value experiment grids
//! - [`record`]: metric records and their JSONL / CSV sinks
//! - [`runner`]: training loops and parallel grid execution
//! - [`fit`]: log-log power-law fits over records
//! - [`saddle`]: escape-time statistics of loss trajectories
//! - [`checks`]: the acceptance suite behind `pclab verify`
//! - [`figures`]: the committed figure configs

use std::path::Path;

use thiserror::Error;

pub mod checks;
pub mod config;
pub mod data;
pub mod figures;
pub mod fit;
pub mod record;
pub mod runner;
pub mod saddle;

pub use config::ExperimentConfig;
pub use record::MetricRecord;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] pclab_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
    #[error("fit: {0}")]
    Fit(String),
}

impl LabError {
    pub(crate) fn context(self, path: &Path) -> Self {
        match self {
            LabError::Data(m) => LabError::Data(format!("{}: {m}", path.display())),
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl From<pclab_core::numkit::NumError> for LabError {
    fn from(e: pclab_core::numkit::NumError) -> Self {
        LabError::Core(e.into())
    }
}

impl From<pclab_core::parameterization::ParamError> for LabError {
    fn from(e: pclab_core::parameterization::ParamError) -> Self {
        LabError::Core(e.into())
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
