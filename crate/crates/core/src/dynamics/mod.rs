//! State space, transition-map families, the noise model and the open-loop
//! simulator for the residual system
//!
//! ```text
//! S_{t+1} = S_t + G(S_t, t) + xi_t,    xi_t ~ N(0, sigma^2 I)
//! ```
//!
//! plus the two local-stability estimators used throughout the crate: the
//! spectral norm of a matrix by power iteration, and a finite-time Lyapunov
//! exponent from tangent-vector propagation.

mod map;
mod noise;
mod spectral;
mod trajectory;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use map::{random_orthogonal, LinearResidual, MapFamily, StateVector, Switched, TanhNet, TransitionMap};
pub use noise::{derive_seed, NoiseModel, NoiseStream};
pub use spectral::{spectral_norm, SpectralNorm};
pub use trajectory::{StepEvent, StepRecord, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("state diverged at step {step} (norm {norm})")]
    Divergence { step: usize, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tangent vector collapsed to zero at step {step}")]
    DegenerateDirection { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
}

/// One transition `S + G(S, t) + xi`, drawing exactly `d` values from `noise`.
///
/// `t` is the logical time seen by non-autonomous maps.
pub fn step(
    map: &TransitionMap,
    state: &StateVector,
    t: usize,
    noise: &mut NoiseStream,
) -> Result<StateVector, DynamicsError> {
    check_dim(map, state)?;
    let s = state.as_vector();
    let next = s + map.evaluate(s, t) + noise.vector(s.len());
    finite_state(next, t)
}

/// Noise-free transition used for the reference trajectory.
pub fn ideal_step(map: &TransitionMap, state: &StateVector, t: usize) -> Result<StateVector, DynamicsError> {
    check_dim(map, state)?;
    let s = state.as_vector();
    finite_state(s + map.evaluate(s, t), t)
}

/// Runs `n_steps` uncontrolled transitions from `s0`, recording the
/// noiseless reference run alongside.
pub fn simulate_open_loop(
    map: &TransitionMap,
    s0: &StateVector,
    noise: &NoiseModel,
    n_steps: usize,
) -> Result<Trajectory, DynamicsError> {
    if n_steps == 0 {
        return Err(DynamicsError::InvalidArgument("n_steps must be >= 1".into()));
    }
    check_dim(map, s0)?;
    let mut stream = noise.stream();
    let mut traj = Trajectory::new(s0.clone(), vec![noise.seed()]);
    for t in 0..n_steps {
        let s = step(map, traj.current().expect("seeded with s0"), t, &mut stream)?;
        let ideal = ideal_step(map, traj.current_ideal().expect("seeded with s0"), t)?;
        traj.push(s, ideal, StepRecord::open_loop());
    }
    Ok(traj)
}

/// Central-difference Jacobian of `G(., t)` at `state` with step `h`.
pub fn jacobian_fd(
    map: &TransitionMap,
    state: &StateVector,
    t: usize,
    h: f64,
) -> Result<DMatrix<f64>, DynamicsError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(DynamicsError::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    check_dim(map, state)?;
    let d = state.dim();
    let s = state.as_vector();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus[j] += h;
        minus[j] -= h;
        let col = (map.evaluate(&plus, t) - map.evaluate(&minus, t)) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence {
                step: t,
                norm: f64::INFINITY,
            });
        }
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Finite-time largest Lyapunov exponent along a noisy trajectory.
///
/// A unit tangent vector is pushed through `I + J_t` at every visited state
/// and renormalized; the exponent is the mean log stretch factor.
pub fn lyapunov_estimate(
    map: &TransitionMap,
    s0: &StateVector,
    noise: &NoiseModel,
    n_steps: usize,
) -> Result<f64, DynamicsError> {
    if n_steps < 10 {
        return Err(DynamicsError::InvalidArgument(format!(
            "lyapunov_estimate needs at least 10 steps, got {n_steps}"
        )));
    }
    check_dim(map, s0)?;
    let d = s0.dim();
    let mut stream = noise.stream();
    let mut state = s0.clone();
    let mut tangent = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut log_sum = 0.0;
    for t in 0..n_steps {
        let jac = map.jacobian(state.as_vector(), t);
        let pushed = &tangent + jac * &tangent;
        let stretch = pushed.norm();
        if !(stretch > 0.0 && stretch.is_finite()) {
            return Err(DynamicsError::DegenerateDirection { step: t });
        }
        log_sum += stretch.ln();
        tangent = pushed / stretch;
        state = step(map, &state, t, &mut stream)?;
    }
    Ok(log_sum / n_steps as f64)
}

fn check_dim(map: &TransitionMap, state: &StateVector) -> Result<(), DynamicsError> {
    if map.dim() != state.dim() {
        return Err(DynamicsError::DimensionMismatch {
            expected: map.dim(),
            got: state.dim(),
        });
    }
    Ok(())
}

fn finite_state(v: DVector<f64>, t: usize) -> Result<StateVector, DynamicsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(StateVector::from_vector(v).expect("finite and non-empty"))
    } else {
        Err(DynamicsError::Divergence {
            step: t,
            norm: v.norm(),
        })
    }
}
