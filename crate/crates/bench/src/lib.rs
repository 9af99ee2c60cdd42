//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;

use halo_core::controller::{ControllerConfig, ObserverSetup, RectifierSpec};
use halo_core::dynamics::{LinearResidual, NoiseModel, StateVector, TanhNet, TransitionMap};
use halo_core::horizon::{critical_horizon, HorizonParams};
use halo_core::observer::{FrameShape, ObserverCalibration};

pub const SEED: u64 = 0x5eed;

/// Everything a closed-loop run needs, sized by `d`.
pub struct Fixture {
    pub map: TransitionMap,
    pub s0: StateVector,
    pub noise: NoiseModel,
    pub cal: ObserverCalibration,
    pub cfg: ControllerConfig,
    pub spec: RectifierSpec,
    pub observer: ObserverSetup,
    pub horizon: usize,
}

pub fn linear_fixture(d: usize, lambda: f64) -> Fixture {
    let sigma2 = 0.01;
    let map: TransitionMap = LinearResidual::scaled_orthogonal(d, lambda.exp(), SEED).unwrap().into();
    let n_star = critical_horizon(&HorizonParams::new(lambda, d as f64 * sigma2, d as f64).unwrap());
    let horizon = (4.0 * n_star).round() as usize;
    Fixture {
        map,
        s0: StateVector::filled(d, 1.0),
        noise: NoiseModel::new(sigma2, SEED).unwrap(),
        cal: ObserverCalibration::reference(),
        cfg: ControllerConfig::new(lambda * n_star, (1.15 * horizon as f64).ceil() as usize),
        spec: RectifierSpec::default(),
        observer: ObserverSetup {
            obs_noise: 0.1,
            shape: FrameShape { layers: 4, heads: 4, context_len: 64 },
            generator: ObserverCalibration::reference(),
        },
        horizon,
    }
}

pub fn tanh_map(d: usize) -> TransitionMap {
    TanhNet::random(d, 1.0, 1.1, SEED).unwrap().into()
}

/// Dense matrix with a fixed, non-symmetric pattern.
pub fn dense(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.45)
}
