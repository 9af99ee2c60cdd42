//! Seeded Monte Carlo experiments.
//!
//! An [`ExperimentConfig`] names a scenario and the system, observer and
//! controller it runs on. [`run_experiment`] resolves the derived quantities
//! (reference rate, critical horizon, automatic threshold), runs every seed
//! in parallel, and writes plot-ready artifacts. Run `i` of every arm uses
//! dynamics seed `derive_seed(seed, i)`, so arms are compared on identical
//! noise.

mod config;
mod experiment;
mod metrics;

use thiserror::Error;

pub use config::{
    AlphaBeta, CalibrationSection, CalibrationSetting, ControllerSection, ExperimentConfig, HorizonSetting, MapConfig,
    ObserverConfig, OutputConfig, OutputFormat, PsiSetting, RunConfig, SampleSource, Scenario, SensitivityConfig,
    SweepConfig, SystemConfig, CONFIG_VERSION, DEFAULT_BUDGET_FACTOR,
};
pub use experiment::{
    calibration_samples, correlation_study, run_experiment, CalibrationReport, CorrelationSummary, ExperimentResult,
    ResolvedSummary, SensitivityRow, Setup, TraceRow,
};
pub use metrics::{
    group_aggregates, lead_time, omega_error_correlation, pearson, rectification_success_rate,
    relative_step_overhead, reset_outcomes, Aggregates, Arm, GroupAggregates, RunRecord,
};

use crate::controller::ControllerError;
use crate::dynamics::DynamicsError;
use crate::horizon::HorizonError;
use crate::observer::ObserverError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config at {path}: {message}")]
    Validation { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for everything that went wrong while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation { .. } => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(ControllerError, DynamicsError, HorizonError, ObserverError);
