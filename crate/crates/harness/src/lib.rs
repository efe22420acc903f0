//! Experiment runner for the compliant-control simulation: friction
//! identification, torque tracking, weight-drop statistics, dynamic tracking
//! and the dual-compliance timeline.

pub mod experiments;
pub mod metrics;
pub mod output;
pub mod stats;

use thiserror::Error;

use phri_core::plant::PlantError;
use phri_core::sim::SimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<PlantError> for HarnessError {
    fn from(e: PlantError) -> Self {
        Self::Sim(e.into())
    }
}

impl From<phri_core::dynamics::DynamicsError> for HarnessError {
    fn from(e: phri_core::dynamics::DynamicsError) -> Self {
        Self::Sim(e.into())
    }
}
