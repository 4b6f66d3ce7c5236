//! Experiment driver behind the `gestalt` command-line tool: artifact
//! layout, the individual commands, CSV and plot output, and the run
//! manifest.

mod commands;
mod config;
mod eval;
mod manifest;
mod plot;
mod records;

use std::io;

use thiserror::Error;

use crate::cnn::CnnError;
use crate::dataset::DatasetError;
use crate::intuition::IntuitionError;
use crate::memory::MemoryError;

pub use commands::{
    cmd_build_memory, cmd_eval, cmd_gen_deficient, cmd_report, cmd_sweep, cmd_train, load_deficient_suite,
    load_memory_checked, load_model, Workspace,
};
pub use config::{ExperimentConfig, ExperimentParams, Paths};
pub use eval::{check_activation_trend, evaluate, Evaluation, SetPredictions};
pub use manifest::{sha256_file, Manifest};
pub use plot::render_svg;
pub use records::{read_records, render_report, wilson_interval, write_records, AccuracyRecord, Mode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    /// An artifact was built from different inputs than the ones in use.
    #[error("{0}")]
    Stale(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Intuition(#[from] IntuitionError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// Process exit status: 1 usage, 2 data or format, 3 stale artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Stale(_)
            | HarnessError::Dataset(DatasetError::Provenance(_))
            | HarnessError::Intuition(IntuitionError::StaleMemory { .. }) => 3,
            HarnessError::Intuition(IntuitionError::Threshold(_)) => 1,
            _ => 2,
        }
    }
}
