//! Closed-loop controller.
//!
//! Each observation is turned into a drift estimate and added to the
//! accumulated uncertainty `omega`. Once `omega >= psi` the controller
//! rectifies instead of stepping: the state is projected back toward the
//! reference run, the history since the previous anchor is dropped and
//! `omega` restarts at zero. Runs end when the task finishes, when the step
//! budget is spent, or when resets repeat without progress.

mod external;
mod halo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, StateVector, StepEvent, StepRecord, Trajectory};
use crate::observer::ObserverError;

pub use external::{
    connect_tcp, run_halo_external, serve_stub, spawn_adapter, AdapterMessage, AdapterSession, ControllerMessage,
    ExternalRunError, StubConfig, StubReport, TransportError, COMPRESSION_TEMPLATE, PROTOCOL_VERSION, REINIT_TEMPLATE,
};
pub use halo::{run_halo, HaloRun, ObserverSetup};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Stability threshold; `f64::INFINITY` disables the controller.
    pub psi: f64,
    pub floor_at_zero: bool,
    /// Hard limit on executed steps, resets included.
    pub max_steps: usize,
    /// Consecutive resets without progress that end the run.
    pub osc_window: usize,
    /// Anchor displacement below which a reset counts as no progress.
    pub progress_tol: f64,
}

impl ControllerConfig {
    pub fn new(psi: f64, max_steps: usize) -> Self {
        Self {
            psi,
            max_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.psi > 0.0) {
            return Err(ControllerError::InvalidConfig(format!("psi must be > 0, got {}", self.psi)));
        }
        if self.osc_window == 0 || self.max_steps == 0 {
            return Err(ControllerError::InvalidConfig("osc_window and max_steps must be >= 1".into()));
        }
        if !(self.progress_tol >= 0.0) {
            return Err(ControllerError::InvalidConfig(format!(
                "progress_tol must be >= 0, got {}",
                self.progress_tol
            )));
        }
        Ok(())
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            psi: 5.0,
            floor_at_zero: true,
            max_steps: 1000,
            osc_window: 3,
            progress_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stable,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    TerminatedHardLimit,
    TerminatedOscillation,
    /// The external generator failed mid-run.
    TerminatedTransport,
}

/// What the run was re-anchored to: a state vector in simulation, the
/// generator's summary text otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    State(Vec<f64>),
    Summary(String),
}

impl Anchor {
    /// Euclidean distance between state anchors; summaries are either
    /// identical (0) or unrelated (infinite).
    pub fn displacement(&self, other: &Anchor) -> f64 {
        match (self, other) {
            (Anchor::State(a), Anchor::State(b)) if a.len() == b.len() => {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            }
            (Anchor::Summary(a), Anchor::Summary(b)) if a == b => 0.0,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetRecord {
    /// Executed-step index (0-based) of the reset.
    pub step: usize,
    pub anchor: Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub omega: f64,
    /// Executed steps so far, resets included.
    pub step: usize,
    pub resets: Vec<ResetRecord>,
    pub status: RunStatus,
}

impl ControllerState {
    pub fn new() -> Self {
        Self {
            omega: 0.0,
            step: 0,
            resets: Vec::new(),
            status: RunStatus::Running,
        }
    }

    /// Executed steps between consecutive resets.
    pub fn reset_gaps(&self) -> Vec<usize> {
        self.resets.windows(2).map(|w| w[1].step - w[0].step).collect()
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifyMode {
    FullReset,
    #[default]
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifierSpec {
    /// Fraction of the current error kept by a partial rectification.
    pub epsilon: f64,
    pub mode: RectifyMode,
}

impl RectifierSpec {
    pub fn full() -> Self {
        Self {
            epsilon: 0.0,
            mode: RectifyMode::FullReset,
        }
    }

    pub fn partial(epsilon: f64) -> Result<Self, ControllerError> {
        let spec = Self {
            epsilon,
            mode: RectifyMode::Partial,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(ControllerError::InvalidConfig(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Error fraction actually retained.
    pub fn retained(&self) -> f64 {
        match self.mode {
            RectifyMode::FullReset => 0.0,
            RectifyMode::Partial => self.epsilon,
        }
    }
}

impl Default for RectifierSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            mode: RectifyMode::Partial,
        }
    }
}

pub fn update_uncertainty(omega: f64, drift: f64, cfg: &ControllerConfig) -> f64 {
    let next = omega + drift;
    if cfg.floor_at_zero {
        next.max(0.0)
    } else {
        next
    }
}

pub fn check_stability(omega: f64, psi: f64) -> Regime {
    if omega >= psi {
        Regime::Critical
    } else {
        Regime::Stable
    }
}

/// Projects the current state to `S* + eps * delta`, appends the reset
/// record (with `omega = 0`), marks the steps since the previous anchor as
/// discarded and resets the controller. The reference run does not advance.
///
/// `record` carries the observation that triggered the reset.
pub fn rectify(
    traj: &mut Trajectory,
    spec: &RectifierSpec,
    ctrl: &mut ControllerState,
    record: StepRecord,
) -> Result<StateVector, ControllerError> {
    let (Some(state), Some(ideal)) = (traj.current(), traj.current_ideal()) else {
        return Err(ControllerError::InvalidConfig("rectify needs a trajectory with states".into()));
    };
    let ideal = ideal.clone();
    let delta = state.as_vector() - ideal.as_vector();
    let projected = StateVector::from_vector(ideal.as_vector() + delta * spec.retained())?;
    discard_since_anchor(traj);
    traj.push(
        projected.clone(),
        ideal,
        StepRecord {
            omega: Some(0.0),
            event: StepEvent::Reset,
            discarded: false,
            ..record
        },
    );
    ctrl.omega = 0.0;
    ctrl.resets.push(ResetRecord {
        step: ctrl.step,
        anchor: Anchor::State(projected.to_vec()),
    });
    ctrl.step += 1;
    Ok(projected)
}

/// Marks every record after the most recent reset as discarded.
pub(crate) fn discard_since_anchor(traj: &mut Trajectory) {
    for rec in traj.records.iter_mut().rev() {
        if rec.event == StepEvent::Reset {
            break;
        }
        rec.discarded = true;
    }
}

/// True when the last `osc_window` resets left their anchors within
/// `progress_tol` of one another, i.e. re-anchoring made no progress.
pub fn detect_oscillation(ctrl: &ControllerState, cfg: &ControllerConfig) -> bool {
    let w = cfg.osc_window;
    if ctrl.resets.len() < w {
        return false;
    }
    let tail = &ctrl.resets[ctrl.resets.len() - w..];
    tail.windows(2)
        .all(|p| p[0].anchor.displacement(&p[1].anchor) < cfg.progress_tol)
}
