//! Experiment runner for federated unrolled reconstruction on synthetic
//! phantoms: configuration profiles, data generation, run artifacts, run
//! comparison and the oracle self-test.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod suites;

use std::path::Path;

use thiserror::Error;

pub use compare::{compare_runs, format_table, write_compare_csv, CompareRow};
pub use config::{ClientSpec, ExperimentConfig, Profile};
pub use experiment::{run_experiment, ExperimentOutcome, Manifest, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
    #[error("malformed run artifact: {0}")]
    Artifact(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Fed(#[from] modfed::fed::FedError),
    #[error(transparent)]
    Recon(#[from] modfed::recon::ReconError),
    #[error(transparent)]
    Mri(#[from] modfed::mri::MriError),
    #[error(transparent)]
    Metric(#[from] modfed::metrics::MetricError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
