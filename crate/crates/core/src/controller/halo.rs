use serde::{Deserialize, Serialize};

use super::{
    check_stability, detect_oscillation, rectify, update_uncertainty, ControllerConfig, ControllerError,
    ControllerState, RectifierSpec, Regime, RunStatus,
};
use crate::dynamics::{
    derive_seed, ideal_step, step, NoiseModel, NoiseStream, StateVector, StepEvent, StepRecord, Trajectory,
    TransitionMap,
};
use crate::observer::{drift_proxy, mean_attention_entropy, synth_attention, FrameShape, ObserverCalibration};

/// Seed lane of the observation-noise stream, kept apart from the dynamics
/// stream so the controller never perturbs dynamics draws.
pub(crate) const OBSERVATION_LANE: u64 = 0x6f62_7365_7276_6572;

/// How the simulated generator turns the true local expansion into attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverSetup {
    /// Standard deviation of the entropy observation error, in nats.
    pub obs_noise: f64,
    pub shape: FrameShape,
    /// The entropy-drift relation the generator actually follows. The
    /// controller inverts its own calibration, which may differ.
    pub generator: ObserverCalibration,
}

impl Default for ObserverSetup {
    fn default() -> Self {
        Self {
            obs_noise: 0.1,
            shape: FrameShape::default(),
            generator: ObserverCalibration::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaloRun {
    pub trajectory: Trajectory,
    pub controller: ControllerState,
    /// Dynamics transitions taken.
    pub logical_steps: usize,
    /// Records produced, resets included.
    pub executed_steps: usize,
}

impl HaloRun {
    pub fn status(&self) -> RunStatus {
        self.controller.status
    }

    pub fn resets(&self) -> usize {
        self.controller.resets.len()
    }
}

/// Closed-loop run on the simulator until `horizon` dynamics transitions
/// have been taken.
///
/// Every executed step first observes: the true local rate
/// `ln ||I + J(S_t)||_2` is encoded as synthetic attention, read back through
/// `cal`, and accumulated. A critical reading rectifies instead of stepping,
/// so logical time stands still for that step. The run stops early when
/// `cfg.max_steps` executed steps are spent or resets stop making progress.
///
/// Dynamics noise comes from `noise` exactly as in
/// [`simulate_open_loop`](crate::dynamics::simulate_open_loop); observation
/// noise from a stream seeded with `derive_seed(noise.seed(), lane)`.
pub fn run_halo(
    map: &TransitionMap,
    s0: &StateVector,
    noise: &NoiseModel,
    cal: &ObserverCalibration,
    cfg: &ControllerConfig,
    spec: &RectifierSpec,
    observer: &ObserverSetup,
    horizon: usize,
) -> Result<HaloRun, ControllerError> {
    cfg.validate()?;
    spec.validate()?;
    observer.shape.validate()?;
    if horizon == 0 {
        return Err(ControllerError::InvalidConfig("horizon must be >= 1".into()));
    }
    if map.dim() != s0.dim() {
        return Err(crate::dynamics::DynamicsError::DimensionMismatch {
            expected: map.dim(),
            got: s0.dim(),
        }
        .into());
    }

    let obs_seed = derive_seed(noise.seed(), OBSERVATION_LANE);
    let mut dyn_stream = noise.stream();
    let mut obs_stream = NoiseStream::new(1.0, obs_seed);
    let mut traj = Trajectory::new(s0.clone(), vec![noise.seed(), obs_seed]);
    let mut ctrl = ControllerState::new();
    let mut logical = 0usize;

    loop {
        if logical >= horizon {
            ctrl.status = RunStatus::Finished;
            break;
        }
        if ctrl.step >= cfg.max_steps {
            ctrl.status = RunStatus::TerminatedHardLimit;
            break;
        }
        let state = traj.current().expect("simulation trajectories hold states").clone();

        let expansion = map.local_expansion(state.as_vector(), logical);
        let lambda_true = expansion.max(f64::MIN_POSITIVE).ln();
        let frame = synth_attention(lambda_true, &observer.generator, observer.obs_noise, &mut obs_stream, &observer.shape)?;
        let entropy = mean_attention_entropy(&frame)?;
        let drift = drift_proxy(entropy, cal);
        ctrl.omega = update_uncertainty(ctrl.omega, drift, cfg);
        let record = StepRecord {
            entropy: Some(entropy),
            drift: Some(drift),
            omega: Some(ctrl.omega),
            event: StepEvent::Step,
            discarded: false,
        };

        match check_stability(ctrl.omega, cfg.psi) {
            Regime::Critical => {
                rectify(&mut traj, spec, &mut ctrl, record)?;
                if detect_oscillation(&ctrl, cfg) {
                    ctrl.status = RunStatus::TerminatedOscillation;
                    break;
                }
            }
            Regime::Stable => {
                let next = step(map, &state, logical, &mut dyn_stream)?;
                let ideal = ideal_step(map, traj.current_ideal().expect("aligned with states"), logical)?;
                traj.push(next, ideal, record);
                ctrl.step += 1;
                logical += 1;
            }
        }
    }

    Ok(HaloRun {
        executed_steps: ctrl.step,
        trajectory: traj,
        controller: ctrl,
        logical_steps: logical,
    })
}
